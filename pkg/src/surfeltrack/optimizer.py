"""First-order solver for the per-frame registration objective.

The loop alternates gradient steps with periodic re-association (a block
coordinate scheme: the solve context is rebuilt at the current parameters
every reassoc_every accepted iterations). Steps that increase the
objective are rejected and the step scale backed off, so the accepted
objective sequence is non-increasing within each association epoch.

Two step rules are available. "gd" (default) is plain gradient descent
with fixed base step sizes, backtracked on rejection. "adam" uses
diagonal second-moment preconditioning; its sign-like steps move every
parameter at full step size, which is aggressive on rough photometric
terrain, so it is opt-in. Translation-like and quaternion-like
parameters use separate step sizes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .kinematics import DeformationState
from .losses import SolveContext, gradient, objective


@dataclass
class OptimizerConfig:
    algorithm: str = "gd"       # "gd" | "adam"
    lr_trans: float = 1e-3      # meters per unit preconditioned step
    lr_quat: float = 1e-2
    max_iters: int = 50
    reassoc_every: int = 5
    tol: float = 1e-5           # relative decrease over tol_window iters
    tol_window: int = 5
    max_rejects: int = 12       # scale halvings per direction before stopping
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class OptimizeResult:
    state: DeformationState
    status: str                 # "ok" | "skipped"
    iterations: int = 0
    initial_objective: float = float("nan")
    final_objective: float = float("nan")
    message: str = ""
    # objective trace: start value, each accepted step, and the re-measured
    # value after each re-association (association epochs shift the measure)
    history: list = field(default_factory=list)


def _step_scales(n_nodes: int, cfg: OptimizerConfig) -> np.ndarray:
    """Per-parameter base step size over the flat layout [q_j, b_j, ..., q_g, t_g]."""
    s = np.empty(7 * (n_nodes + 1))
    for j in range(n_nodes + 1):
        s[7 * j: 7 * j + 4] = cfg.lr_quat
        s[7 * j + 4: 7 * j + 7] = cfg.lr_trans
    return s


def optimize(state0: DeformationState, build_context, cfg: OptimizerConfig,
             ) -> OptimizeResult:
    """Minimize the objective starting from state0.

    build_context(state) -> SolveContext must freeze associations and
    targets at the given parameters; it is called once per association
    epoch. A context whose construction or first evaluation finds no data
    association skips the frame (warning status), matching the contract
    that rejection is data, not an error, at the frame level.
    """
    n = state0.n_nodes
    try:
        ctx = build_context(state0)
        f0 = objective(state0, ctx)
    except ValueError as e:
        if "no data association" in str(e) or "nothing to render" in str(e):
            return OptimizeResult(state=state0.copy(), status="skipped",
                                  message=str(e))
        raise
    if not np.isfinite(f0):
        return OptimizeResult(state=state0.copy(), status="skipped",
                              message="non-finite objective at start")

    scales = _step_scales(n, cfg)
    x = state0.to_vector()
    f_cur = f0
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    t = 0
    scale = 1.0
    history = [f0]
    epoch_start = 0             # index into history where the current
    accepted = 0                # association epoch's measure begins
    stuck = False

    while accepted < cfg.max_iters and not stuck:
        state = DeformationState.from_vector(x, n)
        g = gradient(state, ctx)
        gnorm = float(np.linalg.norm(g))
        if gnorm < 1e-14:
            break
        if cfg.algorithm == "adam":
            t += 1
            m = cfg.beta1 * m + (1 - cfg.beta1) * g
            v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
            mh = m / (1 - cfg.beta1 ** t)
            vh = v / (1 - cfg.beta2 ** t)
            direction = mh / (np.sqrt(vh) + cfg.eps)
        elif cfg.algorithm == "gd":
            direction = g
        else:
            raise ValueError(f"unknown optimizer algorithm: {cfg.algorithm!r}")

        # backtrack on the step scale until the objective decreases; the
        # accepted scale persists across iterations and regrows by 1.5x
        tried = 0
        while True:
            x_new = x - scale * scales * direction
            f_new = objective(DeformationState.from_vector(x_new, n), ctx)
            if f_new <= f_cur:
                break
            scale *= 0.5
            tried += 1
            if tried >= cfg.max_rejects:
                stuck = True
                break
        if stuck:
            break
        x = x_new
        f_cur = f_new
        accepted += 1
        scale = min(scale * 1.5, 1.0)
        history.append(f_cur)
        # objective values from different association epochs are not
        # comparable, so the stall window never spans a rebuild
        epoch = history[epoch_start:]
        if (len(epoch) > cfg.tol_window
                and epoch[-1 - cfg.tol_window] - epoch[-1]
                < cfg.tol * max(abs(epoch[-1 - cfg.tol_window]), 1e-30)):
            break
        if accepted % cfg.reassoc_every == 0 and accepted < cfg.max_iters:
            try:
                ctx = build_context(DeformationState.from_vector(x, n))
                f_cur = objective(DeformationState.from_vector(x, n), ctx)
            except ValueError as e:
                if ("no data association" in str(e)
                        or "nothing to render" in str(e)):
                    break  # keep progress made so far
                raise
            history.append(f_cur)
            epoch_start = len(history) - 1

    # final <= initial is part of the contract; re-association can shift the
    # measure, so fall back to the start state in the pathological case
    if f_cur > f0:
        x, f_cur = state0.to_vector(), f0
    return OptimizeResult(state=DeformationState.from_vector(x, n),
                          status="ok", iterations=accepted,
                          initial_objective=f0, final_objective=f_cur,
                          history=history)
