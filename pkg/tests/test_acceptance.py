"""Acceptance criteria 1-9. Each test prints one PASS/FAIL line, repeated in the run summary."""

import csv
import time
from contextlib import contextmanager

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from asfl import config as C
from asfl import nn
from asfl import orchestrator as O
from asfl.data import synth_dataset
from asfl.experiment import build, run_rounds, sweep
from asfl.models import resmini
from asfl.netsim import reference_fleet
from asfl.split import merge, split

from conftest import random_spec
from gradcheck import LAYER_KINDS, check_layer_gradients, layer_cases, rel_error

pytestmark = pytest.mark.acceptance

# independent per-layer parameter counts and per-sample boundary sizes of resmini
RESMINI_LAYER_PARAMS = [80, 0, 1168, 1168, 4640, 4640, 18496, 18496, 73856, 650]
RESMINI_BOUNDARY_NUMEL = {0: 256, 1: 2048, 2: 512, 3: 512, 4: 256, 5: 256, 6: 128, 7: 128, 8: 64, 9: 64}

SWEEP_SCHEMES = ["sl", "sfl2", "sfl4", "sfl6", "sfl8", "fl", "asfl"]


@contextmanager
def criterion(request, label, budget_s):
    """Time a criterion, enforce its runtime budget and log one PASS/FAIL line."""
    info = {"msg": ""}
    start = time.perf_counter()
    status = "FAIL"
    try:
        yield info
        elapsed = time.perf_counter() - start
        assert elapsed < budget_s, f"runtime {elapsed:.1f}s over budget {budget_s}s"
        status = "PASS"
    finally:
        elapsed = time.perf_counter() - start
        line = f"{status} {label}: {info['msg']} [{elapsed:.1f}s / {budget_s}s]"
        request.config._acceptance_lines.append(line)
        print(line)


def batch_sizes(n, b):
    return [b] * (n // b) + ([n % b] if n % b else [])


def expected_split_bytes(sizes, cut, batch, epochs):
    """Closed form for one SL/SFL round on resmini: model down+up plus smashed/label up and gradient down."""
    model = 4 * sum(RESMINI_LAYER_PARAMS[:cut])
    total = 0
    for n in sizes:
        steps = batch_sizes(n, batch) * epochs
        per_sample = 2 * 4 * RESMINI_BOUNDARY_NUMEL[cut] + 4
        total += 2 * model + per_sample * sum(steps)
    return total


@pytest.fixture(scope="module")
def sweep_dirs(tmp_path_factory):
    return tmp_path_factory.mktemp("sweep_a"), tmp_path_factory.mktemp("sweep_b")


def read_rows(path):
    with path.open() as fh:
        return list(csv.DictReader(fh))


# --- 1 ------------------------------------------------------------------------


def test_c1_split_equivalence(request):
    with criterion(request, "C1 split equivalence (200 triples, rel err <= 1e-6)", 60) as info:
        r = np.random.default_rng(1)
        worst = 0.0
        res = resmini()
        for i in range(200):
            spec = res if i % 10 == 0 else random_spec(r, num_classes=int(r.integers(2, 5)))
            p = nn.build_model(spec, i)
            cut = int(r.integers(0, spec.num_layers + 1))
            b = int(r.integers(1, 9))
            x = r.uniform(size=(b, *spec.input_shape))
            y = r.integers(0, spec.num_classes, size=b)

            logits, cache = nn.forward(spec, p, x)
            _, g = nn.loss_and_grad(logits, y)
            full, gx_full = nn.backward(spec, p, cache, g)

            sm = split(p, cut)
            h, cv = nn.forward(spec, sm.vehicle_side, x, 0, cut)
            out, cr = nn.forward(spec, sm.rsu_side, h, cut)
            _, g2 = nn.loss_and_grad(out, y)
            gr, gh = nn.backward(spec, sm.rsu_side, cr, g2)
            gv, gx = nn.backward(spec, sm.vehicle_side, cv, gh)
            grads = merge(type(sm)(gv, gr, cut))
            worst = max(worst, rel_error(out, logits), rel_error(grads.values, full.values),
                        rel_error(gx, gx_full))
        info["msg"] = f"worst relative error {worst:.2e}"
        assert worst <= 1e-6


# --- 2 ------------------------------------------------------------------------


def test_c2_gradient_correctness(request):
    with criterion(request, "C2 finite-difference gradients (8 kinds x 20 shapes, rel err <= 1e-4)", 60) as info:
        worst = {}
        for layer, shape, seed in layer_cases(per_kind=20):
            worst[layer.kind] = max(worst.get(layer.kind, 0.0), check_layer_gradients(layer, shape, seed, 1e-4))
        assert set(worst) == set(LAYER_KINDS)
        kind, err = max(worst.items(), key=lambda kv: kv[1])
        info["msg"] = f"worst {err:.2e} ({kind})"
        assert err <= 1e-4


# --- 3 ------------------------------------------------------------------------


def test_c3_communication_load_ordering(request, sweep_dirs):
    with criterion(request, "C3 per-round bytes SL > SFL2 > SFL4 > SFL6 > SFL8 > FL, closed form exact", 60) as info:
        sweep({"rounds": 1}, SWEEP_SCHEMES, sweep_dirs[0])
        got = {s: int(read_rows(sweep_dirs[0] / f"{s}.metrics.csv")[0]["bytes_total"]) for s in SWEEP_SCHEMES}
        order = ["sl", "sfl2", "sfl4", "sfl6", "sfl8", "fl"]
        info["msg"] = " > ".join(f"{s}={got[s]}" for s in order)
        assert all(got[a] > got[b] for a, b in zip(order, order[1:]))

        cfg = C.resolve({"scheme": "fl", "rounds": 1})
        sizes = [len(v.data) for v in build(cfg).fleet]
        B, E = cfg["batch_size"], cfg["local_epochs"]
        assert got["fl"] == 2 * len(sizes) * 4 * sum(RESMINI_LAYER_PARAMS)
        assert got["sl"] == expected_split_bytes(sizes, C.DEFAULT_SL_CUT, B, E)
        for cut in (2, 4, 6, 8):
            assert got[f"sfl{cut}"] == expected_split_bytes(sizes, cut, B, E)


# --- 4 ------------------------------------------------------------------------


def test_c4_latency_trends(request, tmp_path):
    with criterion(request, "C4 wall clock ASFL < FL, ASFL < SL, SL linear in N (R^2 > 0.99)", 300) as info:
        summaries = sweep({"rounds": 1, "partition": {"mode": "iid"}}, ["fl", "sl", "asfl"], tmp_path)
        t = {s["scheme"]: s["total_wall_clock"] for s in summaries}
        cuts = read_rows(tmp_path / "asfl.metrics.csv")[0]["cuts"]
        assert cuts == "0:8;1:6;2:4;3:2", f"reference rates should span all four bands, got {cuts}"

        # identical vehicles for the N sweep: cycling rates would make each added vehicle slower or faster
        ref_rate = float(np.mean([v.mean_rate for v in reference_fleet(4)]))
        ns, times = [1, 2, 4, 8], []
        spec = resmini()
        state = O.RoundState(0, nn.build_model(spec, 0))
        for n in ns:
            ds = synth_dataset(10, 10 * n, (1, 16, 16), seed=n)
            perm = np.random.default_rng(n).permutation(len(ds))
            profiles = reference_fleet(n, rates=(ref_rate,))
            fleet = [O.Vehicle(p, ds.subset(perm[100 * i:100 * (i + 1)])) for i, p in enumerate(profiles)]
            _, rec = O.run_round_sl(state, fleet, O.TrainConfig(), C.DEFAULT_SL_CUT)
            times.append(rec.wall_clock)
        slope, icpt = np.polyfit(ns, times, 1)
        pred = slope * np.asarray(ns) + icpt
        r2 = 1 - np.sum((times - pred) ** 2) / np.sum((times - np.mean(times)) ** 2)
        info["msg"] = (f"asfl={t['asfl']:.3f}s fl={t['fl']:.3f}s sl={t['sl']:.3f}s; "
                       f"SL vs N R^2={r2:.5f}")
        assert t["asfl"] < t["fl"] and t["asfl"] < t["sl"]
        assert r2 > 0.99


# --- 5 ------------------------------------------------------------------------


def trajectory(raw):
    cfg = C.resolve(raw)
    return [state.params.values.tobytes() for state, _ in run_rounds(cfg)]


def test_c5_scheme_collapse(request):
    with criterion(request, "C5 SFL(cut=L) == FL and ASFL(constant rate) == SFL(mapped cut), bitwise, 3 rounds",
                   120) as info:
        base = {"rounds": 3, "lr": 0.05, "dataset": {"synth": {"per_class": 30, "test_per_class": 5}}}
        L = resmini().num_layers
        assert trajectory({**base, "scheme": "fl"}) == trajectory({**base, "scheme": f"sfl{L}"})
        checked = []
        thr = O.SelectionThresholds(*C.DEFAULTS["thresholds"])
        for rate in (40e6, 80e6, 160e6, 320e6):
            fleet = [{"compute_capacity": 1e9, "mean_rate": rate, "jitter": 0.0}] * 4
            cut = O.select_cut(rate, thr)
            a = trajectory({**base, "fleet": fleet, "scheme": "asfl"})
            b = trajectory({**base, "fleet": fleet, "scheme": f"sfl{cut}"})
            assert a == b
            checked.append(f"{rate / 1e6:g}Mbit/s->cut {cut}")
        info["msg"] = f"fl==sfl{L}; asfl==sfl for " + ", ".join(checked)


# --- 6 ------------------------------------------------------------------------


def test_c6_aggregation(request):
    with criterion(request, "C6 fedavg-mean == elementwise mean (1e-7, 50 sets); paper-literal [1],[3] -> [-2]",
                   30) as info:
        r = np.random.default_rng(6)
        worst = 0.0
        for i in range(50):
            spec = random_spec(r)
            g = nn.build_model(spec, i)
            models = [g.with_values(r.normal(size=len(g))) for _ in range(int(r.integers(1, 8)))]
            out = O.aggregate(g, models, "fedavg-mean").values
            brute = np.array([sum(float(m.values[j]) for m in models) / len(models) for j in range(len(g))])
            worst = max(worst, float(np.max(np.abs(out - brute), initial=0.0)))
        lit_spec = nn.ModelSpec((nn.Dense(1, 1),), (1,), 1)
        g0 = nn.ParameterSet(lit_spec, np.array([0.0, 0.0]))
        lit = O.aggregate(g0, [g0.with_values(np.array([1.0, 0.0])), g0.with_values(np.array([3.0, 0.0]))],
                          "paper-literal")
        info["msg"] = f"worst mean error {worst:.1e}; literal -> {lit.values[0]:g}"
        assert worst <= 1e-7 and lit.values[0] == -2.0


# --- 7 ------------------------------------------------------------------------


def test_c7_cut_selection(request):
    with criterion(request, "C7 band rule, boundaries, clamp above r4, scale invariance", 60) as info:
        r1, r2, r3, r4 = C.DEFAULTS["thresholds"]
        thr = O.SelectionThresholds(r1, r2, r3, r4)
        table = [
            (1.0, 8), (r1 / 2, 8), (r1, 8), (np.nextafter(r1, np.inf), 6),
            ((r1 + r2) / 2, 6), (r2, 6), (np.nextafter(r2, np.inf), 4),
            ((r2 + r3) / 2, 4), (r3, 4), (np.nextafter(r3, np.inf), 2),
            ((r3 + r4) / 2, 2), (r4, 2), (np.nextafter(r4, np.inf), 2), (10 * r4, 2), (1e15, 2),
        ]
        for rate, cut in table:
            assert O.select_cut(rate, thr) == cut, (rate, cut)
        for bad in (0.0, -1.0, float("nan")):
            with pytest.raises(ValueError):
                O.select_cut(bad, thr)

        @settings(max_examples=500, deadline=None, derandomize=True)
        @given(rate=st.floats(1e-3, 1e12), k=st.floats(1e-6, 1e6))
        def scale_invariant(rate, k):
            scaled = O.SelectionThresholds(r1 * k, r2 * k, r3 * k, r4 * k)
            exact = [rate * k <= b for b in scaled.as_tuple()] == [rate <= b for b in thr.as_tuple()]
            if exact:  # skip draws where float rounding moves a rate across a bound
                assert O.select_cut(rate * k, scaled) == O.select_cut(rate, thr)

        scale_invariant()
        info["msg"] = f"{len(table)} band/boundary cases, 500 scaled draws"


# --- 8 ------------------------------------------------------------------------


def test_c8_noniid_learning(request):
    with criterion(request, "C8 non-IID 30 rounds: ASFL >= FL - 2pt, both >= untrained + 20pt", 600) as info:
        raw = {"rounds": 30, "lr": 0.05}
        final = {}
        for scheme in ("fl", "asfl"):
            cfg = C.resolve({**raw, "scheme": scheme})
            setup = build(cfg)
            *_, (_, rec) = run_rounds(cfg, setup)
            final[scheme] = rec.test_accuracy
        _, untrained = O.evaluate(nn.build_model(setup.spec, cfg["seed"]), setup.test)
        info["msg"] = f"untrained={untrained:.3f} fl={final['fl']:.3f} asfl={final['asfl']:.3f}"
        assert final["asfl"] >= final["fl"] - 0.02
        assert min(final.values()) >= untrained + 0.20


# --- 9 ------------------------------------------------------------------------


def test_c9_determinism(request, sweep_dirs):
    with criterion(request, "C9 rerun of the C3 sweep gives byte-identical files", 90) as info:
        first, second = sweep_dirs
        if not any(first.iterdir()):
            sweep({"rounds": 1}, SWEEP_SCHEMES, first)
        sweep({"rounds": 1}, SWEEP_SCHEMES, second)
        names = sorted(p.name for p in first.iterdir())
        assert names == sorted(p.name for p in second.iterdir()) and len(names) == 3 * len(SWEEP_SCHEMES)
        diff = [n for n in names if (first / n).read_bytes() != (second / n).read_bytes()]
        info["msg"] = f"{len(names)} files compared, {len(diff)} differ"
        assert not diff
