"""Workload driver, analysis helpers and figures for the datastore."""

from spotstore.bench.analysis import (
    CostInputs,
    SizingInput,
    bandwidth_timeseries,
    coefficient_of_variation,
    cost_model,
    max_capacity,
    sizing_feasible,
    sizing_time,
)

__all__ = [
    "CostInputs",
    "SizingInput",
    "bandwidth_timeseries",
    "coefficient_of_variation",
    "cost_model",
    "max_capacity",
    "sizing_feasible",
    "sizing_time",
]
