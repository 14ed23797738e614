from blockiot.fhir.api import create_app, parse_date_window
from blockiot.fhir.chart import render_chart
from blockiot.fhir.resources import bundle, observation_resources, operation_outcome, patient_resource
from blockiot.fhir.trend import TrendLine, compute_trend

__all__ = [
    "create_app", "parse_date_window", "render_chart", "bundle", "observation_resources",
    "operation_outcome", "patient_resource", "TrendLine", "compute_trend",
]
