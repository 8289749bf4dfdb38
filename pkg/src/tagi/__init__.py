"""Analytic Gaussian inference for fully connected networks.

Parameters, hidden states and inputs are all Gaussian beliefs updated in
closed form, which also allows conditioning the input on targets or on a
zero derivative.
"""
from .engine import InputBelief, Observation, backward, condition_output, fit, forward, predict, train_epoch
from .net import Model, NetworkSpec, ParameterPosterior, init_posterior, load, save

__all__ = [
    "InputBelief",
    "Model",
    "NetworkSpec",
    "Observation",
    "ParameterPosterior",
    "backward",
    "condition_output",
    "fit",
    "forward",
    "init_posterior",
    "load",
    "predict",
    "save",
    "train_epoch",
]
