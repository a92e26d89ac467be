import sys
from pathlib import Path

import numpy as np
import torch

sys.path.insert(0, str(Path(__file__).parent))

from gazedebias.model import ModelState, gradients, path_loss  # noqa: E402


def finite_difference_check(state: ModelState, batch, selector, weights, n_coords=25, seed=0, step=1e-6):
    """Relative errors of analytic vs central-difference gradients on random coordinates of both blocks.

    The difference quotient only calls the loss, never the backward pass.
    """
    g_enc, g_cls = gradients(state, batch, selector, weights)
    rng = np.random.default_rng(seed)
    errs = []
    for block, grad in (("encoder", g_enc), ("classifier", g_cls)):
        vec = state.encoder_params if block == "encoder" else state.classifier_params
        for i in rng.choice(len(vec), size=min(n_coords, len(vec)), replace=False):
            vals = []
            for sign in (1, -1):
                bumped = vec.clone()
                bumped[i] += sign * step
                enc = bumped if block == "encoder" else state.encoder_params
                cls = bumped if block == "classifier" else state.classifier_params
                with torch.no_grad():
                    loss, _ = path_loss(enc, cls, state.arch, batch, selector, weights)
                vals.append(float(loss))
            numeric = (vals[0] - vals[1]) / (2 * step)
            analytic = float(grad[i])
            scale = max(abs(numeric), abs(analytic), 1e-8)
            errs.append(abs(numeric - analytic) / scale)
    return errs


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is None or not acceptance.RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(acceptance.RESULTS):
        terminalreporter.write_line(acceptance.RESULTS[n])
