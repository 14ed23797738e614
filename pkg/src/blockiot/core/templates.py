"""Template registry, template identification and reading harmonization."""

from __future__ import annotations

from importlib import resources
from pathlib import Path
from typing import Iterable, Iterator, Mapping

import yaml

from blockiot.core.model import (
    DeviceReading,
    DeviceType,
    HarmonizedObservation,
    ObservedValue,
    Template,
    TemplateField,
)
from blockiot.errors import (
    AllKeysUnrecognized,
    AmbiguousTemplate,
    DuplicateIdentifyingKeys,
    NoTemplateMatch,
    TemplateParseError,
)

_LINE = "__line__"


class TemplateRegistry:
    """An immutable collection of templates with unique identifying key-sets."""

    def __init__(self, templates: Iterable[Template] = ()):
        self._templates: tuple[Template, ...] = tuple(templates)
        ids: set[str] = set()
        seen: dict[frozenset[str], str] = {}
        for t in self._templates:
            if t.template_id in ids:
                raise DuplicateIdentifyingKeys(f"duplicate template_id {t.template_id!r}")
            ids.add(t.template_id)
            if t.identifying_keys in seen:
                raise DuplicateIdentifyingKeys(
                    f"templates {seen[t.identifying_keys]!r} and {t.template_id!r} "
                    f"share identifying keys {sorted(t.identifying_keys)}"
                )
            seen[t.identifying_keys] = t.template_id
        self._by_id = {t.template_id: t for t in self._templates}

    def __iter__(self) -> Iterator[Template]:
        return iter(self._templates)

    def __len__(self) -> int:
        return len(self._templates)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TemplateRegistry):
            return NotImplemented
        return sorted(self._templates, key=lambda t: t.template_id) == sorted(
            other._templates, key=lambda t: t.template_id
        )

    def __contains__(self, template_id: object) -> bool:
        return template_id in self._by_id

    def get(self, template_id: str) -> Template:
        return self._by_id[template_id]

    def for_device(self, device_type: DeviceType | str) -> list[Template]:
        device_type = DeviceType.parse(device_type)
        return [t for t in self._templates if t.device_type is device_type]

    def device_types(self) -> set[DeviceType]:
        return {t.device_type for t in self._templates}

    def merged(self, other: "TemplateRegistry") -> "TemplateRegistry":
        return TemplateRegistry(tuple(self) + tuple(other))

    def to_dict(self) -> dict:
        return {"templates": [t.to_dict() for t in self._templates]}

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


def identify_template(payload_keys: Iterable[str], registry: TemplateRegistry) -> Template:
    """Pick the template whose identifying keys are the largest subset of ``payload_keys``."""
    keys = frozenset(payload_keys)
    candidates = [t for t in registry if t.identifying_keys <= keys]
    if not candidates:
        raise NoTemplateMatch(f"no template identifies keys {sorted(keys)}")
    best = max(len(t.identifying_keys) for t in candidates)
    top = [t for t in candidates if len(t.identifying_keys) == best]
    if len(top) > 1:
        raise AmbiguousTemplate(
            "keys match equally specific templates: " + ", ".join(t.template_id for t in top)
        )
    return top[0]


def harmonize(reading: DeviceReading, template: Template) -> HarmonizedObservation:
    payload = reading.payload
    recognized = [f for f in template.fields if f.key in payload]
    if not recognized:
        raise AllKeysUnrecognized(
            f"none of {sorted(payload)} are fields of template {template.template_id!r}"
        )
    values = tuple(
        ObservedValue(f.key, f.unit, payload[f.key], f.classify(payload[f.key])) for f in recognized
    )
    field_keys = set(template.field_keys)
    warnings = tuple(
        f"unrecognized key {k!r}" for k in sorted(payload) if k not in field_keys
    )
    return HarmonizedObservation(
        peer_id=reading.peer_id,
        device_type=template.device_type,
        template_id=template.template_id,
        timestamp=reading.timestamp,
        values=values,
        warnings=warnings,
    )


class _LineLoader(yaml.SafeLoader):
    pass


def _construct_mapping(loader: yaml.SafeLoader, node: yaml.MappingNode) -> dict:
    mapping = loader.construct_mapping(node, deep=True)
    mapping[_LINE] = node.start_mark.line + 1
    return mapping


_LineLoader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_mapping)


def _limit(raw: object, where: str, line: int | None) -> float | None:
    if raw is None:
        return None
    if isinstance(raw, bool) or not isinstance(raw, (int, float)):
        raise TemplateParseError(f"{where}: limit must be a number or null", line)
    return raw


def _parse_template(entry: Mapping, index: int) -> Template:
    line = entry.get(_LINE) if isinstance(entry, Mapping) else None
    where = f"template #{index + 1}"
    if not isinstance(entry, Mapping):
        raise TemplateParseError(f"{where}: expected a mapping")
    for required in ("template_id", "device_type", "fields", "identifying_keys"):
        if required not in entry:
            raise TemplateParseError(f"{where}: missing {required!r}", line)
    raw_fields = entry["fields"]
    if not isinstance(raw_fields, list) or not raw_fields:
        raise TemplateParseError(f"{where}: 'fields' must be a non-empty list", line)
    fields = []
    for f in raw_fields:
        fline = f.get(_LINE) if isinstance(f, Mapping) else line
        if not isinstance(f, Mapping) or "key" not in f:
            raise TemplateParseError(f"{where}: each field needs a 'key'", fline)
        try:
            fields.append(
                TemplateField(
                    key=str(f["key"]),
                    unit=str(f.get("unit", "")),
                    lower_limit=_limit(f.get("lower_limit"), where, fline),
                    upper_limit=_limit(f.get("upper_limit"), where, fline),
                )
            )
        except ValueError as exc:
            if isinstance(exc, TemplateParseError):
                raise
            raise TemplateParseError(f"{where}: {exc}", fline) from None
    ident = entry["identifying_keys"]
    if not isinstance(ident, list):
        raise TemplateParseError(f"{where}: 'identifying_keys' must be a list", line)
    try:
        return Template(
            template_id=str(entry["template_id"]),
            device_type=entry["device_type"],
            fields=tuple(fields),
            identifying_keys=frozenset(str(k) for k in ident),
            description=str(entry.get("description", "")),
        )
    except ValueError as exc:
        raise TemplateParseError(f"{where}: {exc}", line) from None


def parse_template_registry(text: str) -> TemplateRegistry:
    try:
        doc = yaml.load(text, Loader=_LineLoader)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark or exc.context_mark
        raise TemplateParseError(
            str(exc.problem or exc), mark.line + 1 if mark else None,
            mark.column + 1 if mark else None,
        ) from None
    except yaml.YAMLError as exc:
        raise TemplateParseError(str(exc)) from None
    if doc is None:
        return TemplateRegistry()
    if not isinstance(doc, Mapping) or not isinstance(doc.get("templates", []), list):
        raise TemplateParseError("top level must be a mapping with a 'templates' list", 1)
    entries = doc.get("templates") or []
    return TemplateRegistry(_parse_template(e, i) for i, e in enumerate(entries))


def load_template_registry(path: str | Path) -> TemplateRegistry:
    return parse_template_registry(Path(path).read_text(encoding="utf-8"))


def default_template_text() -> str:
    return resources.files("blockiot.data").joinpath("templates/default.yaml").read_text("utf-8")


def default_registry() -> TemplateRegistry:
    return parse_template_registry(default_template_text())
