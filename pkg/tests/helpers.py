"""Shared builders for the test modules."""
import numpy as np

from djds.abstraction import AbstractionParams
from djds.benchmarks import tiny_inputs, tiny_model
from djds.model import HistorySegment, LinearDjdsModel, quantize
from djds.simulate import window_grid

# filled by test_acceptance.py, printed in the terminal summary
ACCEPTANCE_LINES = []


def tiny_params(N=3, h=2.0, zeta_s=0.2, dt=0.02, inputs=None):
    model = tiny_model()
    step = window_grid(model.tau, dt)[1]
    inputs = quantize(tiny_inputs(), 0.0) if inputs is None else inputs
    return AbstractionParams(h, N, HistorySegment.constant([zeta_s], model.tau, step), inputs)


def noiseless(model):
    """Same drift, no diffusion or resets."""
    return LinearDjdsModel(model.A1, model.A2, model.B, tau1=model.tau1, tau2=model.tau2,
                           tau3=model.tau3, offset=model.offset)


def zero_model(n=1, m=1, tau=0.0):
    z = np.zeros((n, n))
    return LinearDjdsModel(z, z, np.zeros((n, m)), tau1=tau)


def scalar_model(a1=0.0, a2=0.0, b=0.0, g=0.0, gbar=0.0, r=0.0, rbar=0.0, lam=0.0,
                 tau1=0.0, tau2=0.0, tau3=0.0):
    return LinearDjdsModel([[a1]], [[a2]], [[b]], G=[[[g]]], Gbar=[[[gbar]]], R=[[[r]]],
                           Rbar=[[[rbar]]], lam=[lam], tau1=tau1, tau2=tau2, tau3=tau3)
