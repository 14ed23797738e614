from blockiot.core.model import (
    AlertPrefs,
    AlertRule,
    Channel,
    DeviceReading,
    DeviceType,
    HarmonizedObservation,
    ObservedValue,
    PatientProfile,
    Template,
    TemplateField,
    ValueStatus,
)
from blockiot.core.peerid import derive_peer_id, is_peer_id
from blockiot.core.templates import (
    TemplateRegistry,
    default_registry,
    harmonize,
    identify_template,
    load_template_registry,
    parse_template_registry,
)

__all__ = [
    "AlertPrefs", "AlertRule", "Channel", "DeviceReading", "DeviceType",
    "HarmonizedObservation", "ObservedValue", "PatientProfile", "Template",
    "TemplateField", "TemplateRegistry", "ValueStatus", "default_registry",
    "derive_peer_id", "harmonize", "identify_template", "is_peer_id",
    "load_template_registry", "parse_template_registry",
]
