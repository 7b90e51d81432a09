"""Kernel benchmark: numba @njit loops vs the vectorized numpy reference.

Times each twinned kernel on shapes representative of a training step
(12 slots, 132 ordered pairs, dim 64) plus the assignment solver, and one
end-to-end engine step under each backend. Matmul is not twinned (both
backends use BLAS), which is why it does not appear here.
"""

from __future__ import annotations

import time

import numpy as np

from .kernels import assignment, ops, reference


def _has_numba() -> bool:
    try:
        import numba  # noqa: F401

        return True
    except ImportError:
        return False


def _time(fn, repeats: int) -> float:
    fn()  # warmup (and JIT compile)
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t0) / repeats


def _kernel_cases(rng: np.random.Generator) -> list[tuple[str, object]]:
    x = rng.standard_normal((132, 64))
    gy = rng.standard_normal((132, 64))
    y, inv_std = reference.layer_norm_fwd(x, 1e-5)
    sm = reference.softmax_fwd(x)
    idx = rng.integers(0, 12, size=132).astype(np.int64)
    table = rng.standard_normal((12, 64))
    g132 = rng.standard_normal((132, 64))
    p = rng.standard_normal(100_000)
    g = rng.standard_normal(100_000)
    cost = rng.random((12, 12))
    return [
        ("layer_norm_fwd", lambda: (x, 1e-5)),
        ("layer_norm_bwd", lambda: (y, inv_std, gy)),
        ("softmax_fwd", lambda: (x,)),
        ("softmax_bwd", lambda: (sm, gy)),
        ("log_softmax_fwd", lambda: (x,)),
        ("gather_rows", lambda: (table, idx)),
        ("scatter_add_rows", lambda: (np.zeros((12, 64)), idx, g132)),
        (
            "adam_step",
            lambda: (
                p.copy(),
                g,
                np.zeros(p.size),
                np.zeros(p.size),
                1e-3,
                0.9,
                0.999,
                1e-8,
                1,
            ),
        ),
        ("solve_assignment", lambda: (cost,)),
    ]


def run_kernel_benchmarks(repeats: int = 200, seed: int = 0) -> list[dict]:
    rng = np.random.default_rng(seed)
    numba_available = _has_numba()
    jit_mod = None
    jit_lap = None
    if numba_available:
        from .kernels import jit as jit_mod

        jit_lap = assignment.compile_solver()
    rows = []
    for name, args_factory in _kernel_cases(rng):
        if name == "solve_assignment":
            numpy_fn = assignment.solve_assignment
            numba_fn = jit_lap
        else:
            numpy_fn = getattr(reference, name)
            numba_fn = getattr(jit_mod, name) if jit_mod else None
        row = {
            "kernel": name,
            "numpy_us": _time(lambda: numpy_fn(*args_factory()), repeats) * 1e6,
        }
        if numba_fn is not None:
            row["numba_us"] = _time(lambda: numba_fn(*args_factory()), repeats) * 1e6
            row["speedup"] = row["numpy_us"] / row["numba_us"]
        rows.append(row)
    return rows


def run_engine_benchmark(repeats: int = 20, seed: int = 7) -> dict:
    """One traversal (3 steps, forward + backward) under each backend."""
    from .exec_engine import ExecutionEngine, traversal_loss
    from .nn.rng import RngState
    from .nn.tensor import Tensor, backward
    from .scene_graph import VectorSceneGraph

    row: dict = {"kernel": "engine_traversal"}
    backends = ["numpy"] + (["numba"] if _has_numba() else [])
    previous = ops.backend
    try:
        for backend in backends:
            ops.use(backend)
            rng = RngState(seed)
            n, d = 12, 64
            engine = ExecutionEngine(d, rng)
            gen = np.random.default_rng(seed)
            vsg = VectorSceneGraph(
                object_matrix=Tensor(gen.standard_normal((n, d))),
                edge_matrix=Tensor(gen.standard_normal((n * (n - 1), d))),
                slot_count=n,
                slot_objects=tuple(range(n)),
            )
            ivs = [Tensor(gen.standard_normal(d), requires_grad=True) for _ in range(3)]
            bits = gen.integers(0, 2, size=(3, n))

            def step():
                trace = engine.execute(vsg, ivs)
                backward(traversal_loss(trace.step_logits, bits))
                engine.zero_grad()

            row[f"{backend}_us"] = _time(step, repeats) * 1e6
        if "numpy_us" in row and "numba_us" in row:
            row["speedup"] = row["numpy_us"] / row["numba_us"]
    finally:
        ops.use(previous)
    return row


def format_table(rows: list[dict]) -> str:
    header = "numba available" if _has_numba() else "numba NOT available (numpy only)"
    lines = [
        f"kernel backends: numpy reference vs numba jit ({header})",
        f"{'kernel':<22}{'numpy (us)':>14}{'numba (us)':>14}{'speedup':>10}",
    ]
    for row in rows:
        numpy_t = f"{row['numpy_us']:.2f}" if "numpy_us" in row else "-"
        numba_t = f"{row['numba_us']:.2f}" if "numba_us" in row else "-"
        speedup = f"{row['speedup']:.2f}x" if "speedup" in row else "-"
        lines.append(f"{row['kernel']:<22}{numpy_t:>14}{numba_t:>14}{speedup:>10}")
    return "\n".join(lines)
