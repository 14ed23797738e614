import hashlib
from datetime import date, datetime, timedelta, timezone

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blockiot.core.model import (
    DeviceReading,
    DeviceType,
    Template,
    TemplateField,
    ValueStatus,
)
from blockiot.core.peerid import canonical_biometrics, derive_peer_id, is_peer_id
from blockiot.core.templates import (
    TemplateRegistry,
    harmonize,
    identify_template,
    load_template_registry,
    parse_template_registry,
)
from blockiot.errors import (
    AllKeysUnrecognized,
    AmbiguousTemplate,
    DuplicateIdentifyingKeys,
    EmptyName,
    InvalidDate,
    NoTemplateMatch,
    TemplateParseError,
)

# sha256(b"wendy|barnes|1969-01-15"), computed once with hashlib and frozen
WENDY_PEER_ID = "50bdcc1386e34a34b0fef144cbc67149a61c9b536faaaba36c45ae4984f3ba7c"
TS = datetime(2026, 3, 2, 9, 0, tzinfo=timezone.utc)


# -- peer ids ----------------------------------------------------------------


def test_wendy_peer_id_golden():
    pid = derive_peer_id("Wendy", "Barnes", date(1969, 1, 15))
    assert pid == WENDY_PEER_ID
    assert is_peer_id(pid)


def test_peer_id_normalization():
    d = date(1969, 1, 15)
    assert derive_peer_id("  wendy ", "BARNES", d) == derive_peer_id("Wendy", "Barnes", d)
    assert derive_peer_id("Wendy", "Barnes", "1969-01-15") == WENDY_PEER_ID
    assert canonical_biometrics("Mary  Ann", "O'Neil", d) == "mary ann|o'neil|1969-01-15"


@pytest.mark.parametrize("first,last", [("", "Barnes"), ("Wendy", "   "), ("\t", "x")])
def test_peer_id_empty_name(first, last):
    with pytest.raises(EmptyName):
        derive_peer_id(first, last, date(1969, 1, 15))


@pytest.mark.parametrize("dob", ["1969-02-30", "not a date", 19690115])
def test_peer_id_invalid_date(dob):
    with pytest.raises(InvalidDate):
        derive_peer_id("Wendy", "Barnes", dob)


name_st = st.text(alphabet="abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ'-", min_size=1, max_size=12)


@given(name_st, name_st, st.dates(), st.text(" \t", max_size=3), st.text(" \t", max_size=3))
def test_peer_id_case_and_whitespace_invariant(first, last, dob, pad_l, pad_r):
    base = derive_peer_id(first, last, dob)
    variant = derive_peer_id(pad_l + first.swapcase() + pad_r, pad_r + last.upper() + pad_l, dob)
    assert variant == base
    expected = hashlib.sha256(
        f"{first.lower()}|{last.lower()}|{dob.isoformat()}".encode()
    ).hexdigest()
    assert base == expected


# -- templates ---------------------------------------------------------------


def test_default_registry_has_eight_device_types(registry):
    assert len(registry) == 8
    assert registry.device_types() == set(DeviceType)


def test_identify_examples(registry):
    assert identify_template({"bpm", "spo2"}, registry).device_type is DeviceType.HEART_RATE
    assert identify_template({"spo2", "perfusion_index"}, registry).device_type is DeviceType.BLOOD_OXYGEN
    with pytest.raises(NoTemplateMatch):
        identify_template({"unknown_key"}, registry)


def test_identify_ambiguous():
    reg = TemplateRegistry([
        Template("a", DeviceType.HEART_RATE, (TemplateField("x", ""), TemplateField("y", "")), frozenset({"x"})),
        Template("b", DeviceType.EKG, (TemplateField("y", ""), TemplateField("z", "")), frozenset({"y"})),
    ])
    with pytest.raises(AmbiguousTemplate):
        identify_template({"x", "y"}, reg)
    assert identify_template({"x"}, reg).template_id == "a"


def test_identify_most_specific_wins():
    reg = TemplateRegistry([
        Template("a", DeviceType.HEART_RATE, (TemplateField("x", ""), TemplateField("y", "")), frozenset({"x"})),
        Template("b", DeviceType.EKG, (TemplateField("x", ""), TemplateField("y", "")), frozenset({"x", "y"})),
    ])
    assert identify_template({"x", "y", "q"}, reg).template_id == "b"


ALL_KEYS = sorted({f.key for t in parse_template_registry(
    open(__import__("blockiot.core.templates", fromlist=["x"]).__file__.replace(
        "core/templates.py", "data/templates/default.yaml")).read()) for f in t.fields} | {"noise"})


@settings(max_examples=300)
@given(st.sets(st.sampled_from(ALL_KEYS), min_size=1, max_size=6))
def test_identify_matches_brute_force_oracle(registry, keys):
    subsets = [t for t in registry if set(t.identifying_keys) <= keys]
    if not subsets:
        with pytest.raises(NoTemplateMatch):
            identify_template(keys, registry)
        return
    size = max(len(t.identifying_keys) for t in subsets)
    top = [t.template_id for t in subsets if len(t.identifying_keys) == size]
    if len(top) > 1:
        with pytest.raises(AmbiguousTemplate):
            identify_template(keys, registry)
    else:
        assert identify_template(keys, registry).template_id == top[0]


def _reading(payload, pid=WENDY_PEER_ID):
    return DeviceReading(pid, TS, payload)


def test_harmonize_heart_rate_within(registry):
    t = identify_template({"bpm", "spo2"}, registry)
    obs = harmonize(_reading({"bpm": 80, "spo2": 98}), t)
    assert [v.status for v in obs.values] == [ValueStatus.WITHIN_LIMITS] * 2
    assert obs.timestamp == TS and obs.warnings == ()


def test_harmonize_statuses(registry):
    bp = registry.get("bp-cuff-v1")
    obs = harmonize(_reading({"systolic": 185, "diastolic": 120, "pulse": 39}), bp)
    st_ = {v.key: v.status for v in obs.values}
    assert st_ == {"systolic": ValueStatus.ABOVE_UPPER, "diastolic": ValueStatus.WITHIN_LIMITS,
                   "pulse": ValueStatus.BELOW_LOWER}
    obs = harmonize(_reading({"systolic": "high", "diastolic": 60}), bp)
    assert obs.value("systolic").status is ValueStatus.NOT_NUMERIC
    assert obs.value("diastolic").status is ValueStatus.WITHIN_LIMITS


def test_harmonize_warns_on_unknown_keys(registry):
    obs = harmonize(_reading({"glucose": 100, "firmware": "2.1"}), registry.get("glucose-meter-v1"))
    assert [v.key for v in obs.values] == ["glucose"]
    assert obs.warnings == ("unrecognized key 'firmware'",)


def test_harmonize_all_unrecognized(registry):
    with pytest.raises(AllKeysUnrecognized):
        harmonize(_reading({"nothing": 1}), registry.get("glucose-meter-v1"))


@given(st.floats(allow_nan=False, allow_infinity=False, min_value=-1e6, max_value=1e6),
       st.floats(min_value=-1e3, max_value=1e3), st.floats(min_value=1e-3, max_value=1e3))
def test_limit_trichotomy(value, lower, width):
    f = TemplateField("x", "u", lower, lower + width)
    status = f.classify(value)
    oracle = (ValueStatus.BELOW_LOWER if value < lower else
              ValueStatus.ABOVE_UPPER if value > lower + width else ValueStatus.WITHIN_LIMITS)
    assert status is oracle
    assert f.classify(lower) is ValueStatus.WITHIN_LIMITS
    assert f.classify(lower + width) is ValueStatus.WITHIN_LIMITS


@given(st.dictionaries(st.sampled_from(["bpm", "spo2", "extra"]),
                       st.one_of(st.integers(-500, 500), st.floats(-500, 500, allow_nan=False)),
                       min_size=1))
def test_harmonize_never_changes_values(registry, payload):
    if "bpm" not in payload:
        payload["bpm"] = 70
    obs = harmonize(_reading(dict(payload)), identify_template(payload, registry))
    assert obs.timestamp == TS
    for v in obs.values:
        assert v.value == payload[v.key]


def test_template_invariants():
    with pytest.raises(ValueError):
        TemplateField("x", "u", 5, 5)
    with pytest.raises(ValueError):
        Template("t", DeviceType.EKG, (TemplateField("a", ""),), frozenset({"b"}))


def test_registry_roundtrip(registry, tmp_path):
    text = registry.dumps()
    assert parse_template_registry(text) == registry
    p = tmp_path / "t.yaml"
    p.write_text(text)
    assert load_template_registry(p) == registry


def test_empty_template_file(tmp_path):
    p = tmp_path / "empty.yaml"
    p.write_text("")
    assert len(load_template_registry(p)) == 0


def test_duplicate_identifying_keys():
    text = """
templates:
  - template_id: a
    device_type: heart_rate
    identifying_keys: [bpm]
    fields: [{key: bpm, unit: bpm}]
  - template_id: b
    device_type: ekg
    identifying_keys: [bpm]
    fields: [{key: bpm, unit: bpm}]
"""
    with pytest.raises(DuplicateIdentifyingKeys):
        parse_template_registry(text)


def test_parse_error_has_position():
    with pytest.raises(TemplateParseError) as info:
        parse_template_registry("templates:\n  - template_id: a\n    fields: [unclosed\n")
    assert info.value.line is not None and info.value.column is not None
    with pytest.raises(TemplateParseError) as info:
        parse_template_registry("templates:\n  - template_id: a\n    device_type: toaster\n"
                                "    identifying_keys: [x]\n    fields: [{key: x, unit: ''}]\n")
    assert info.value.line == 2


def test_merged_registry_adds_user_templates(registry):
    extra = parse_template_registry("""
templates:
  - template_id: scale-v1
    device_type: heart_rate
    identifying_keys: [weight_kg]
    fields: [{key: weight_kg, unit: kg, lower_limit: 30, upper_limit: 200}]
""")
    merged = registry.merged(extra)
    assert len(merged) == 9
    assert identify_template({"weight_kg"}, merged).template_id == "scale-v1"
