"""End-to-end acceptance suite: every criterion prints one pass/fail line.

The heavyweight fixtures (the full toy training run and the space-comparison
runs) are session-scoped and shared across criteria. Pilot-run numbers that
informed the fixed thresholds are recorded next to each assertion.
"""

import json
import os
import time

import numpy as np
import pytest

from twindiff import categorical as cat
from twindiff import cli, contrastive as ctr, data, engine, evaluation as ev
from twindiff import gaussian, nn
from twindiff.rng import substream
from twindiff.schedule import linear_schedule

from helpers import fd_agreement, tiny_net

TOY_SEED = 0
TOY_N = 10_000
# the stated budget assumes 8 cores; scale it for the cores actually present
TRAIN_BUDGET_SECONDS = 45 * 60 * max(1.0, 8.0 / (os.cpu_count() or 8))

# pilot (seed 0, batch 256, hidden 64/128/256, emb 16, lr 2e-3, lambda 0.2):
# 2k-sample agreement at epochs 300/400/500 was color 0.854/0.929/0.829 and
# circle 0.976/0.985/0.979 - oscillating but comfortably above the gates
# from epoch 300 on
TOY_EPOCHS = 400
TOY_BATCH = 256

ABLATION_SIZES = (6, 6, 6, 5, 5, 4)   # six columns, all K within 2..6
ABLATION_ROWS = 5_000
ABLATION_EPOCHS = 250
ABLATION_SEEDS = (1, 2, 3)


def report(criterion: str, ok: bool, detail: str = "") -> None:
    line = f"ACCEPT {criterion}: {'pass' if ok else 'FAIL'} {detail}".rstrip()
    print(line, flush=True)


# ---------------------------------------------------------------------------
# shared toy pipeline run (criteria 1, 3, 9)

@pytest.fixture(scope="session")
def toy_data(tmp_path_factory):
    """The generated 10k-row toy table plus its schema file."""
    work = tmp_path_factory.mktemp("toy_data")
    toy_csv = str(work / "toy.csv")
    assert cli.main(["toy", "--n", str(TOY_N), "--seed", str(TOY_SEED),
                     "--out", toy_csv]) == 0
    return {"toy_csv": toy_csv, "schema_json": str(work / "toy.schema.json")}


@pytest.fixture(scope="session")
def toy_artifacts(toy_data, tmp_path_factory):
    """Full CLI pipeline on the toy table: train, sample, eval."""
    work = tmp_path_factory.mktemp("toy_run")
    toy_csv = toy_data["toy_csv"]
    schema_json = toy_data["schema_json"]
    ckpt = str(work / "model.ckpt")
    fake_csv = str(work / "fake.csv")
    report_json = str(work / "report.json")

    cfg = work / "train.cfg"
    cfg.write_text(
        f"lr = 2e-3\nbatch_size = {TOY_BATCH}\nepochs = {TOY_EPOCHS}\n"
        "hidden = 64,128,256\nemb_dim = 16\nlambda_c = 0.2\nlambda_d = 0.2\n"
        "margin = 1.0\nnegative_method = method3\ntimesteps = 50\n"
        "beta_start = 1e-5\nbeta_end = 2e-2\nseed = 0\n"
    )
    t0 = time.perf_counter()
    assert cli.main(["train", "--data", toy_csv, "--schema", schema_json,
                     "--config", str(cfg), "--out", ckpt,
                     "--log-every", "1000"]) == 0
    assert cli.main(["sample", "--ckpt", ckpt, "--n", str(TOY_N),
                     "--seed", "1", "--out", fake_csv]) == 0
    elapsed = time.perf_counter() - t0
    assert cli.main(["eval", "--real", toy_csv, "--fake", fake_csv,
                     "--schema", schema_json, "--out", report_json]) == 0
    return {
        "work": work, "toy_csv": toy_csv, "schema_json": schema_json,
        "ckpt": ckpt, "fake_csv": fake_csv, "report_json": report_json,
        "train_sample_seconds": elapsed,
    }


@pytest.mark.slow
def test_criterion_1_toy_fidelity(toy_artifacts):
    spec = data.load_schema_spec(toy_artifacts["schema_json"])
    schema, real = data.load_csv(toy_artifacts["toy_csv"], spec)
    _, fake = data.load_csv(toy_artifacts["fake_csv"], spec)

    real_xy = np.array([[r[0], r[1]] for r in real.rows])
    fake_xy = np.array([[r[0], r[1]] for r in fake.rows])
    real_color = np.array([data.TOY_COLORS.index(c) for c in real.column("color")])
    fake_color = np.array([data.TOY_COLORS.index(c) for c in fake.column("color")])
    real_circle = np.array([data.TOY_RINGS.index(c) for c in real.column("circle")])
    fake_circle = np.array([data.TOY_RINGS.index(c) for c in fake.column("circle")])

    color_agree = float((ev.nn1_predict(real_xy, real_color, fake_xy) == fake_color).mean())
    circle_agree = float((ev.nn1_predict(real_xy, real_circle, fake_xy) == fake_circle).mean())
    coverage = json.load(open(toy_artifacts["report_json"]))["coverage"]
    elapsed = toy_artifacts["train_sample_seconds"]

    ok = (color_agree >= 0.80 and circle_agree >= 0.90 and coverage >= 0.60
          and elapsed <= TRAIN_BUDGET_SECONDS)
    report("1 toy-fidelity",
           ok,
           f"color={color_agree:.3f} circle={circle_agree:.3f} "
           f"coverage={coverage:.3f} train+sample={elapsed:.0f}s")
    assert color_agree >= 0.80
    assert circle_agree >= 0.90
    assert coverage >= 0.60
    assert elapsed <= TRAIN_BUDGET_SECONDS


# ---------------------------------------------------------------------------
# criterion 2: discrete vs continuous space, majority direction over 3 seeds

def _latent_discrete_table(n, seed):
    """Rows coupled through a 12-way latent class: each column is a
    deterministic base plus a small structured offset, so category combos
    are mostly unique (pilot: ~3300 distinct over 5k rows, ~1% of rows in
    combos frequent enough to have a zero 5-NN radius)."""
    rng = np.random.default_rng([seed, 777])
    z = rng.integers(0, 12, n)
    cols = {}
    for i, k in enumerate(ABLATION_SIZES):
        base = (z * (i + 2) + 3 * i) % k
        vals = (base + rng.integers(0, 3, n)) % k
        cols[f"c{i}"] = [f"v{v}" for v in vals]
    header = list(cols)
    return data.Table(header, [[cols[h][i] for h in header] for i in range(n)])


@pytest.fixture(scope="session")
def ablation_reports(tmp_path_factory):
    work = tmp_path_factory.mktemp("ablation")
    path = str(work / "latent.csv")
    data.write_csv(_latent_discrete_table(ABLATION_ROWS, 123), path)
    cfg = work / "ablate.cfg"
    cfg.write_text(
        f"epochs = {ABLATION_EPOCHS}\nbatch_size = 256\nhidden = 16,32,64\n"
        "emb_dim = 16\nlr = 2e-3\n"
    )
    reports = []
    for seed in ABLATION_SEEDS:
        out = str(work / f"ablate_{seed}.json")
        assert cli.main(["ablate-space", "--data", path, "--config", str(cfg),
                         "--seed", str(seed), "--out", out]) == 0
        reports.append(json.load(open(out)))
    return reports


@pytest.mark.slow
def test_criterion_2_space_comparison(ablation_reports):
    wins = sum(r["discrete_space"]["coverage"] >= r["continuous_space"]["coverage"]
               for r in ablation_reports)
    pairs = [(round(r["discrete_space"]["coverage"], 3),
              round(r["continuous_space"]["coverage"], 3)) for r in ablation_reports]
    ok = wins * 2 > len(ablation_reports)
    report("2 space-comparison", ok, f"disc-vs-cont per seed: {pairs}")
    assert ok


# ---------------------------------------------------------------------------
# criterion 3: contrastive on/off both run and report all four components

@pytest.mark.slow
def test_criterion_3_contrastive_ablation(toy_data, tmp_path):
    schema_json = toy_data["schema_json"]
    toy_csv = toy_data["toy_csv"]
    seen = {}
    for tag, lam in (("off", "0.0"), ("on", "0.2")):
        cfg = tmp_path / f"cl_{tag}.cfg"
        cfg.write_text(
            f"lr = 2e-3\nbatch_size = 512\nepochs = 3\nhidden = 16,32,64\n"
            f"emb_dim = 16\nlambda_c = {lam}\nlambda_d = {lam}\nseed = 2\n"
        )
        ckpt = str(tmp_path / f"cl_{tag}.ckpt")
        assert cli.main(["train", "--data", toy_csv, "--schema", schema_json,
                         "--config", str(cfg), "--out", ckpt,
                         "--log-every", "1000"]) == 0
        lines = open(ckpt + ".losses.log").read().strip().splitlines()
        fields = [dict(kv.split("=") for kv in ln.split()) for ln in lines]
        assert all({"loss_diff_c", "loss_cl_c", "loss_diff_d", "loss_cl_d"}
                   <= set(f) for f in fields)
        seen[tag] = fields
    cl_off = [float(f["loss_cl_c"]) for f in seen["off"]]
    cl_on = [float(f["loss_cl_c"]) for f in seen["on"]]
    ok = all(v == 0.0 for v in cl_off) and any(v != 0.0 for v in cl_on)
    report("3 contrastive-ablation", ok,
           f"runs complete; cl components off={max(cl_off)} on_max={max(cl_on):.3f}")
    assert ok


# ---------------------------------------------------------------------------
# criterion 4: forward-process equivalence (Monte Carlo vs closed forms)

def test_criterion_4_forward_equivalence():
    t_start = time.perf_counter()
    sched = linear_schedule(50, 1e-5, 2e-2)
    n = 100_000
    rng = np.random.default_rng(1234)

    x0 = np.array([0.45, -0.7])
    x = np.tile(x0, (n, 1))
    cont_ok = True
    for t in range(1, 51):
        x = gaussian.forward_step_cont(x, t, rng.standard_normal(x.shape), sched)
        if t in (1, 10, 25, 50):
            ab = sched.alpha_bar_at(t)
            sig = np.sqrt(1.0 - ab)
            mean_ok = np.all(np.abs(x.mean(axis=0) - np.sqrt(ab) * x0)
                             < 3.0 * sig / np.sqrt(n))
            var_ok = np.all(np.abs(x.var(axis=0) / (1.0 - ab) - 1.0) < 0.02)
            cont_ok = cont_ok and mean_ok and var_ok

    disc_ok = True
    for k in (2, 5):
        state = np.tile(np.eye(k)[0], (n, 1))
        for t in range(1, 11):
            probs = cat.forward_step_cat(state, t, sched, (k,))
            state = cat.sample_cat(probs, (k,), rng)
        closed = cat.forward_marginal_cat(np.eye(k)[[0]], 10, sched, (k,))[0]
        tv = 0.5 * np.abs(state.mean(axis=0) - closed).sum()
        disc_ok = disc_ok and tv < 0.01

    elapsed = time.perf_counter() - t_start
    ok = cont_ok and disc_ok and elapsed <= 120.0
    report("4 forward-equivalence", ok,
           f"cont={cont_ok} disc={disc_ok} elapsed={elapsed:.1f}s")
    assert cont_ok and disc_ok
    assert elapsed <= 120.0


# ---------------------------------------------------------------------------
# criterion 5: posterior / KL correctness

def test_criterion_5_posterior_kl():
    sched = linear_schedule(50, 1e-5, 2e-2)
    rng = np.random.default_rng(5)

    def onehot(i, k):
        out = np.zeros((1, k))
        out[0, i] = 1.0
        return out

    bayes_ok = True
    for k in (2, 3, 4):
        for t in (2, 17, 50):
            for xt_i in range(k):
                for x0_i in range(k):
                    got = cat.posterior_cat(onehot(xt_i, k), onehot(x0_i, k),
                                            t, sched, (k,))[0]
                    b = sched.beta_at(t)
                    abp = sched.alpha_bar_at(t - 1)
                    num = np.array([
                        ((1 - b) * (xt_i == j) + b / k) * (abp * (x0_i == j) + (1 - abp) / k)
                        for j in range(k)
                    ])
                    want = num / num.sum()
                    bayes_ok = bayes_ok and bool(np.allclose(got, want, atol=1e-12))

    kl_ok = True
    for _ in range(500):
        k = int(rng.integers(2, 7))
        x0 = onehot(int(rng.integers(k)), k)
        xt = onehot(int(rng.integers(k)), k)
        t = int(rng.integers(2, 51))
        loss = cat.loss_diff_d(x0, xt, rng.standard_normal((1, k)) * 4, t, sched, (k,))
        kl_ok = kl_ok and float(loss.value) >= -1e-12

    lin_ok = True
    for trial in range(20):
        k, t = 3, int(rng.integers(2, 51))
        xt_i = int(rng.integers(k))
        logits = rng.standard_normal((1, k))
        p = cat.softmax_blocks(logits, (k,))[0]
        a, abp = sched.alpha_at(t), sched.alpha_bar_at(t - 1)
        mix = np.zeros(k)
        for c in range(k):
            fac1 = a * np.eye(k)[xt_i] + (1 - a) / k
            fac2 = abp * np.eye(k)[c] + (1 - abp) / k
            mix += p[c] * fac1 * fac2
        want = mix / mix.sum()
        got = cat.reverse_dist_cat(onehot(xt_i, k), logits, t, sched, (k,))[0]
        lin_ok = lin_ok and bool(np.allclose(got, want, atol=1e-12))

    ok = bayes_ok and kl_ok and lin_ok
    report("5 posterior-kl", ok, f"bayes={bayes_ok} kl>=0={kl_ok} linear-form={lin_ok}")
    assert ok


# ---------------------------------------------------------------------------
# criterion 6: gradient suite across every loss

def test_criterion_6_gradient_suite():
    rng = np.random.default_rng(6)
    sched = linear_schedule(50, 1e-5, 2e-2)
    results = {}

    net = tiny_net(rng)
    x = rng.standard_normal((4, 2))
    c = rng.standard_normal((4, 3))
    y = rng.standard_normal((4, 2))
    results["net"] = fd_agreement(
        lambda: nn.vmean(nn.mul(nn.sub(net.forward(x, c, 6), nn.as_var(y)),
                                nn.sub(net.forward(x, c, 6), nn.as_var(y)))),
        net.params())

    net_c = tiny_net(rng)
    x0 = rng.uniform(-1, 1, (4, 2))
    eps = rng.standard_normal((4, 2))
    x_t = gaussian.forward_sample_cont(x0, 12, eps, sched)
    results["diff_c"] = fd_agreement(
        lambda: gaussian.loss_diff_c(net_c.forward(x_t, c, 12), eps),
        net_c.params())

    sizes = (2, 3)
    net_d = tiny_net(rng, in_dim=5, cond_dim=2, out_dim=5)
    x0d = np.concatenate([np.eye(2)[[0, 1, 0, 1]], np.eye(3)[[2, 0, 1, 2]]], axis=1)
    xtd = np.concatenate([np.eye(2)[[1, 1, 0, 0]], np.eye(3)[[0, 2, 2, 1]]], axis=1)
    cond2 = rng.standard_normal((4, 2))
    for t, tag in ((1, "diff_d_nll"), (12, "diff_d_kl")):
        results[tag] = fd_agreement(
            lambda t=t: cat.loss_diff_d(
                x0d, xtd, net_d.forward(xtd, cond2, t), t, sched, sizes),
            net_d.params())

    net_t = tiny_net(rng)
    cond_pos = np.eye(3)[[0, 1, 2, 0]]
    cond_neg = np.eye(3)[[2, 0, 1, 1]]
    results["triplet"] = fd_agreement(
        lambda: ctr.contrastive_loss_c(x0, x_t, cond_pos, cond_neg, net_t, 15,
                                       sched, 10.0),  # margin keeps hinge active
        net_t.params())

    fracs = {k: ok / total for k, (ok, total) in results.items()}
    ok = all(f >= 0.99 for f in fracs.values())
    report("6 gradient-suite", ok,
           " ".join(f"{k}={v:.4f}" for k, v in fracs.items()))
    assert ok, fracs


# ---------------------------------------------------------------------------
# criterion 7: round-trip identities

def test_criterion_7_round_trips(tmp_path):
    sched = linear_schedule(50, 1e-5, 2e-2)
    rng = np.random.default_rng(7)

    x0_ok = True
    for _ in range(100):
        t = int(rng.integers(1, 51))
        x0 = rng.uniform(-1, 1, (3, 2))
        eps = rng.standard_normal((3, 2))
        x_t = gaussian.forward_sample_cont(x0, t, eps, sched)
        back = gaussian.predict_x0_cont(x_t, eps, t, sched)
        x0_ok = x0_ok and np.max(np.abs(back - x0)) < 1e-9

    schema = data.TableSchema((
        data.ColumnSchema("a", "continuous", -3.0, 7.0),
        data.ColumnSchema("b", "discrete", categories=("x", "y", "z")),
    ))
    rows = [[float(rng.uniform(-3, 7)), ("x", "y", "z")[rng.integers(3)]]
            for _ in range(200)]
    cont, disc = data.encode(data.Table(["a", "b"], rows), schema)
    back = data.decode(cont, disc, schema)
    enc_ok = all(abs(o[0] - g[0]) < 1e-12 and o[1] == g[1]
                 for o, g in zip(rows, back.rows))

    model = engine.build_model(schema, engine.TrainConfig(
        batch_size=16, epochs=1, hidden=(4, 8, 16), emb_dim=2, seed=3))
    engine.train(model, cont[:32], disc[:32])
    before = engine.sample(model, 8, substream(11, "sample"))
    path = str(tmp_path / "rt.ckpt")
    engine.save_checkpoint(model, path)
    after = engine.sample(engine.load_checkpoint(path), 8, substream(11, "sample"))
    ckpt_ok = (np.array_equal(before[0], after[0])
               and np.array_equal(before[1], after[1]))

    ok = x0_ok and enc_ok and ckpt_ok
    report("7 round-trips", ok,
           f"predict_x0={x0_ok} encode-decode={enc_ok} checkpoint={ckpt_ok}")
    assert ok


# ---------------------------------------------------------------------------
# criterion 8: coverage oracle

def test_criterion_8_coverage_oracle():
    rng = np.random.default_rng(8)
    real = rng.standard_normal((10, 2))
    fake = rng.standard_normal((10, 2)) * 1.2 + 0.3

    def brute(direction):
        def dist(a, b):
            return np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2))
        if direction == "real":
            d = dist(real, real)
            np.fill_diagonal(d, np.inf)
            radii = np.sort(d, axis=1)[:, 4]
            return float((dist(real, fake).min(axis=1) < radii).mean())
        d = dist(fake, fake)
        np.fill_diagonal(d, np.inf)
        radii = np.sort(d, axis=1)[:, 4]
        return float((dist(fake, real).min(axis=1) < radii).mean())

    exact_ok = all(ev.coverage(fake, real, k=5, direction=d) == brute(d)
                   for d in ("real", "fake"))
    x = rng.standard_normal((30, 3))
    self_ok = ev.coverage(x.copy(), x.copy(), k=5) == 1.0
    ok = exact_ok and self_ok
    report("8 coverage-oracle", ok, f"brute-force-equal={exact_ok} self={self_ok}")
    assert ok


# ---------------------------------------------------------------------------
# criterion 9: sampling-time instrumentation

@pytest.mark.slow
def test_criterion_9_sampling_time_logged(toy_artifacts):
    manifest = json.load(open(toy_artifacts["fake_csv"] + ".manifest.json"))
    secs = manifest["timings"]["sample_seconds"]
    rep = json.load(open(toy_artifacts["report_json"]))
    ok = secs > 0 and rep["sample_seconds"] == secs
    report("9 sampling-time", ok, f"10k rows sampled in {secs:.2f}s (no target)")
    assert ok
