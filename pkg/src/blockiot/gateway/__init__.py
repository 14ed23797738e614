from blockiot.gateway.auth import DeviceAuth
from blockiot.gateway.gateway import Ack, AckStatus, Gateway
from blockiot.gateway.pipeline import IngestEnvelope, Pipeline, Protocol

__all__ = ["Ack", "AckStatus", "DeviceAuth", "Gateway", "IngestEnvelope", "Pipeline", "Protocol"]
