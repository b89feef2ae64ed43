"""Hand-built networks and states shared by the test modules."""

from __future__ import annotations

import numpy as np

from tsclab.microsim import Vehicle, new_state, place_vehicle
from tsclab.network import Intersection, Lane, Movement, Phase, RoadNetwork, SignalState

P, Q, X = SignalState.PROTECTED, SignalState.PERMITTED, SignalState.PROHIBITED
SIDES = ("N", "E", "S", "W")


def cross(length_in: float = 100.0, length_out: float = 100.0, vid: str = "C",
          phases: str = "axis") -> RoadNetwork:
    """One four-way intersection, one lane per side and direction, all twelve turns.

    ``phases="axis"`` gives two phases (NS, EW) protecting every movement of the axis;
    ``phases="single"`` gives each approach its own phase.
    """
    lanes = {}
    for s in SIDES:
        lanes[f"in_{s}"] = Lane(f"in_{s}", length_in, None, vid)
        lanes[f"out_{s}"] = Lane(f"out_{s}", length_out, vid, None)
    movements = {}
    for s in SIDES:
        for t in SIDES:
            if s != t:
                mid = f"{vid}:in_{s}>out_{t}"
                movements[mid] = Movement(mid, f"in_{s}", f"out_{t}", vid)
    if phases == "axis":
        groups = {"NS": ("N", "S"), "EW": ("E", "W")}
    else:
        groups = {s: (s,) for s in SIDES}
    phase_list = [
        Phase(f"{vid}:{name}", vid, {mid: (P if m.in_lane[3:] in members else X) for mid, m in movements.items()})
        for name, members in groups.items()
    ]
    inter = Intersection(vid, tuple(f"in_{s}" for s in SIDES), tuple(f"out_{s}" for s in SIDES))
    return RoadNetwork(lanes, {vid: inter}, movements, {vid: phase_list})


def two_movement_net(len_i: float = 100.0, len_o: float = 50.0) -> RoadNetwork:
    """Intersection with two in-lanes feeding one out-lane each; one phase per movement."""
    lanes = {
        "a": Lane("a", len_i, None, "V"),
        "b": Lane("b", len_i, None, "V"),
        "x": Lane("x", len_o, "V", None),
        "y": Lane("y", len_o, "V", None),
    }
    movements = {"V:a>x": Movement("V:a>x", "a", "x", "V"), "V:b>y": Movement("V:b>y", "b", "y", "V")}
    phases = [
        Phase("V:p0", "V", {"V:a>x": P, "V:b>y": X}),
        Phase("V:p1", "V", {"V:a>x": X, "V:b>y": P}),
    ]
    inter = Intersection("V", ("a", "b"), ("x", "y"))
    return RoadNetwork(lanes, {"V": inter}, movements, {"V": phases})


def corridor(n: int = 2, length: float = 100.0) -> RoadNetwork:
    """``n`` intersections in a row, west to east; one lane each way, through movements only."""
    lanes, inters, movements, phases = {}, {}, {}, {}
    ids = [f"V{k}" for k in range(n)]
    for k, v in enumerate(ids):
        up = ids[k - 1] if k > 0 else None
        lanes[f"e{k}"] = Lane(f"e{k}", length, up, v)  # eastbound into v
    lanes[f"e{n}"] = Lane(f"e{n}", length, ids[-1], None)
    for k, v in enumerate(ids):
        m = Movement(f"{v}:e{k}>e{k + 1}", f"e{k}", f"e{k + 1}", v)
        movements[m.id] = m
        inters[v] = Intersection(v, (f"e{k}",), (f"e{k + 1}",))
        phases[v] = [Phase(f"{v}:go", v, {m.id: P})]
    return RoadNetwork(lanes, inters, movements, phases)


def state_with(network: RoadNetwork, placements: dict[str, list[float]], route_of=None):
    """State holding stationary vehicles at the given positions (metres to the lane end)."""
    st = new_state(network)
    k = 0
    for lane, positions in placements.items():
        for pos in sorted(positions):
            route = route_of(lane) if route_of else _default_route(network, lane)
            place_vehicle(st, Vehicle(f"v{k}", route, 0.0), lane, pos)
            k += 1
    return st


def _default_route(network: RoadNetwork, lane: str) -> tuple[str, ...]:
    outs = network.movements_out_of(lane)
    if not outs:
        return (lane,)
    return (lane, sorted(outs, key=lambda m: m.id)[0].out_lane)


def numeric_grad(f, tensor, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f()`` with respect to ``tensor.data``."""
    out = np.zeros_like(tensor.data)
    flat, g = tensor.data.reshape(-1), out.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + eps
        hi = float(f().data)
        flat[i] = keep - eps
        lo = float(f().data)
        flat[i] = keep
        g[i] = (hi - lo) / (2 * eps)
    return out


def grad_error(f, tensors, eps: float = 1e-5) -> float:
    """Largest per-tensor relative error between backprop and finite differences.

    The error of one tensor is ||analytic - numeric|| / max(||analytic||, ||numeric||),
    which stays meaningful when individual gradient entries are close to zero.
    """
    from tsclab.autodiff import backward

    for t in tensors:
        t.grad[...] = 0.0
    backward(f())
    worst = 0.0
    for t in tensors:
        num = numeric_grad(f, t, eps)
        scale = max(np.linalg.norm(t.grad), np.linalg.norm(num))
        if scale > 0:
            worst = max(worst, float(np.linalg.norm(t.grad - num) / scale))
    return worst


def primitive_cases():
    """``(name, build)`` pairs; ``build(rng)`` returns a scalar closure and its leaf tensors."""
    from tsclab import autodiff as ad

    def leaf(rng, *shape, lo=-1.0, hi=1.0):
        return ad.Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)

    def away_from(x, points, gap=0.05):
        # keep inputs off the kinks of piecewise functions
        for p in points:
            near = np.abs(x.data - p) < gap
            x.data[near] = p + gap * np.where(x.data[near] >= p, 1.5, -1.5)
        return x

    def scalarize(rng, out_shape):
        w = rng.normal(size=out_shape)
        return lambda t: ad.sum(ad.mul(t, w))

    def case(fn, *leaves_shapes, out=None, prep=None):
        def build(rng):
            leaves = [leaf(rng, *s) for s in leaves_shapes]
            if prep:
                prep(leaves)
            shape = fn(*leaves).shape
            red = scalarize(rng, shape)
            return (lambda: red(fn(*leaves))), leaves
        return build

    grp = np.array([0, 0, 1, 2, 2, 2, 1])
    seg = np.array([2, 0, 0, 1, 2, 2])
    idx = np.array([3, 0, 0, 2, 1])

    def positive(ls):
        ls[0].data[...] = np.abs(ls[0].data) + 0.2

    def off_zero(ls):
        away_from(ls[0], [0.0])

    def off_delta(ls):
        away_from(ls[0], [-0.5, 0.5])  # kinks of huber(2x)

    def dropout_case(rng):
        x = leaf(rng, 5, 4)
        red = scalarize(rng, (5, 4))
        seed = int(rng.integers(1 << 31))
        return (lambda: red(ad.dropout(x, 0.3, True, np.random.default_rng(seed)))), [x]

    return [
        ("add", case(lambda a, b: a + b, (3, 4), (1, 4))),
        ("sub", case(lambda a, b: a - b, (3, 4), (3, 1))),
        ("mul", case(lambda a, b: a * b, (3, 4), (4,))),
        ("neg", case(lambda a: -a, (3, 2))),
        ("square", case(ad.square, (3, 2))),
        ("exp", case(ad.exp, (3, 2))),
        ("log", case(ad.log, (3, 2), prep=positive)),
        ("leaky_relu", case(ad.leaky_relu, (4, 3), prep=off_zero)),
        ("huber", case(lambda a: ad.huber(a * 2.0), (4, 3), prep=off_delta)),
        ("reshape", case(lambda a: ad.reshape(a, (2, 6)), (3, 4))),
        ("sum", case(lambda a: ad.sum(a, axis=0), (3, 4))),
        ("mean", case(lambda a: ad.mean(a, axis=1), (3, 4))),
        ("concat", case(lambda a, b: ad.concat([a, b], axis=1), (3, 2), (3, 4))),
        ("matmul", case(lambda a, b: a @ b, (3, 4), (4, 2))),
        ("gather", case(lambda a: ad.gather(a, idx), (4, 3))),
        ("segment_sum", case(lambda a: ad.segment_sum(a, seg, 3), (6, 2))),
        ("segment_mean", case(lambda a: ad.segment_mean(a, seg, 3), (6, 2))),
        ("grouped_softmax", case(lambda a: ad.grouped_softmax(a, grp, 3), (7, 2))),
        ("grouped_log_softmax", case(lambda a: ad.grouped_log_softmax(a, grp, 3), (7, 2))),
        ("layer_norm", case(ad.layer_norm, (4, 6))),
        ("dropout", dropout_case),
    ]


def directional_error(f, tensors, rng, eps: float = 1e-5, n_dirs: int = 2) -> dict[str, float]:
    """Relative error of backprop against central differences along random directions.

    For each tensor and direction ``u`` the analytic value is ``grad . u`` and the
    numeric one ``(f(x + eps u) - f(x - eps u)) / 2 eps``; this covers every entry of
    large weight matrices with two evaluations per direction.
    """
    from tsclab.autodiff import backward

    for t in tensors:
        t.grad[...] = 0.0
    backward(f())
    out = {}
    for t in tensors:
        worst = 0.0
        for _ in range(n_dirs):
            u = rng.normal(size=t.shape)
            u /= np.linalg.norm(u)  # unit step, so few leaky-relu kinks fall inside the stencil
            keep = t.data.copy()
            t.data[...] = keep + eps * u
            hi = float(f().data)
            t.data[...] = keep - eps * u
            lo = float(f().data)
            t.data[...] = keep
            num = (hi - lo) / (2 * eps)
            ana = float(np.sum(t.grad * u))
            scale = max(abs(ana), abs(num))
            if scale > 1e-12:
                worst = max(worst, abs(ana - num) / scale)
        out[t.name] = worst
    return out


def busy_cross_state(seed: int = 0, length: float = 60.0):
    """Four-way crossing with random stationary traffic on every lane."""
    rng = np.random.default_rng(seed)
    net = cross(length_in=length, length_out=length)
    placements = {}
    for lid in net.lanes:
        slots = np.arange(1.0, length, 7.5)
        keep = rng.random(len(slots)) < 0.4
        placements[lid] = [float(p) for p in slots[keep]]
    return state_with(net, placements)
