"""End-to-end acceptance checks.

Each check prints exactly one ``C<n> PASS|FAIL`` line (visible even under
output capture) before asserting. The learning checks train real models and
take several minutes in total on one core.
"""

import dataclasses
import time

import numpy as np
import pytest
import scipy.linalg
from oracles import central_difference, rel_err

from flextsf import tensor as T
from flextsf.attention import AttentionStack, RotaryConfig, causal_mask, rotary_modulate
from flextsf.cli import main as cli_main
from flextsf.data import IrregularSeries, make_synthetic
from flextsf.model import (HALF_LOG_2PI, AblationFlags, Example, FlexTSF, ForwardResult,
                           ModelConfig, count_parameters, loss_elbo, make_example)
from flextsf.optim import make_rng
from flextsf.params import ParamStore
from flextsf.patcher import FlowSolver, kl_to_prior, rk4_integrate
from flextsf.tensor import Tensor
from flextsf.training import (TrainRegime, ablation_suite, evaluate_mse, few_shot_finetune, train,
                              zero_shot_eval)
from flextsf.vtnorm import EPS_SIGMA, denormalize, normalize_series, normalize_times

REFERENCE_PARAMS = 440_066

# Desk-scale recipe shared by the learning checks: deterministic latents,
# random context cuts as augmentation, small batches and a larger step size.
LEARN_MODEL = dict(kl_weight=0.0, sampling="mean")
LEARN_REGIME = dict(lr=3e-3, batch_size=16, epochs=30, patience=100, random_cuts=True)
SEEDS = (0, 1, 2)


@pytest.fixture
def verdict(capsys):
    def emit(name: str, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\n{name} {'PASS' if ok else 'FAIL'} {detail}")
        assert ok, f"{name}: {detail}"
    return emit


def irregular_corpus(seed: int):
    return make_synthetic("drop-masked sine", 1000, (60, 120), seed=seed, irregular=True)


def fit_classic(dataset, seed: int, **flags):
    model = FlexTSF(ModelConfig.classic(**LEARN_MODEL, **flags), seed=seed)
    train(model, dataset, TrainRegime.classic(seed=seed, **LEARN_REGIME))
    return model, evaluate_mse(model, dataset, "test", seed=seed)


@pytest.fixture(scope="module")
def classic_runs():
    """Seed -> (seconds, report) for the irregular corpus, shared by C6 and C8."""
    runs = {}
    for seed in SEEDS:
        start = time.perf_counter()
        _, rep = fit_classic(irregular_corpus(seed), seed)
        runs[seed] = (time.perf_counter() - start, rep)
    return runs


# -- C1 ----------------------------------------------------------------------

def test_c1_gradient_fidelity(verdict):
    start = time.perf_counter()
    cfg = ModelConfig.classic(latent_dim=8, heads=4, head_dim=2, solver_hidden=8)
    model = FlexTSF(cfg, seed=0)
    rng = np.random.default_rng(0)
    n = 2 * cfg.patch_len
    t = np.cumsum(1.0 + rng.exponential(1.0, n))
    obs = np.ones(n, bool)
    obs[2] = False
    series = IrregularSeries("toy", "x", t, np.where(obs, np.sin(t / 3.0), 0.0), obs)
    examples = [make_example(series.slice(0, cfg.patch_len), series.slice(cfg.patch_len, n),
                             0.1, 0.9, 1.0)]

    def loss():
        return loss_elbo(model.forward(examples, make_rng(7), sample=True), 1.0)[0]

    def value():
        with T.no_grad():
            return loss().item()

    model.zero_grad()
    loss().backward()
    worst, worst_name = 0.0, ""
    for name, p in model.params.tensors.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        err = rel_err(analytic, central_difference(value, p.data, 1e-6))
        if err > worst:
            worst, worst_name = err, name
    elapsed = time.perf_counter() - start
    verdict("C1", worst < 1e-4 and elapsed < 60,
            f"max_rel_err={worst:.2e} at {worst_name} (tol 1e-4) "
            f"params={model.count_parameters()} seconds={elapsed:.1f} (limit 60)")


# -- C2 ----------------------------------------------------------------------

def test_c2_vtnorm_contract(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = {"round_trip": 0.0, "mean": 0.0, "std": 0.0, "scale_shift": 0.0, "time_unit": 0.0}
    gap_ok = True
    for _ in range(1000):
        m = int(rng.integers(3, 120))
        times = rng.uniform(-1e5, 1e5) + np.cumsum(rng.exponential(1.0, m) * 10 ** rng.uniform(-2, 3)
                                                   + 1e-3)
        scale, shift = 10 ** rng.uniform(-3, 3), rng.uniform(-1e4, 1e4)
        values = shift + scale * rng.standard_normal(m)
        obs = rng.random(m) > rng.uniform(0, 0.5)
        obs[:2] = True
        s = IrregularSeries("f", "x", times, np.where(obs, values, 0.0), obs)
        mu_g, sd_g = rng.uniform(-10, 10), 10 ** rng.uniform(-1, 2)
        inst = normalize_series(s, mu_g, sd_g, 1.0)
        back = denormalize(inst.values_prime, inst.features)
        mag = max(1.0, np.max(np.abs(values[obs])))
        worst["round_trip"] = max(worst["round_trip"], np.max(np.abs(back - s.values)[obs]) / mag)
        x = inst.values_prime[obs]
        if inst.features.sigma_i > EPS_SIGMA:
            worst["mean"] = max(worst["mean"], abs(x.mean()))
            worst["std"] = max(worst["std"], abs(x.std() - 1.0))
        gap_ok &= bool(np.min(np.diff(inst.times_prime)) == 1.0)
        a, b = 10 ** rng.uniform(-2, 2), rng.uniform(-100, 100)
        moved = IrregularSeries("f", "x", times, np.where(obs, a * values + b, 0.0), obs)
        other = normalize_series(moved, a * mu_g + b, a * sd_g, 1.0)
        worst["scale_shift"] = max(worst["scale_shift"],
                                   np.max(np.abs(other.values_prime - inst.values_prime)))
        t2, _ = normalize_times(times * 2.0 ** int(rng.integers(-20, 21)), 1.0)
        gap_ok &= bool(np.array_equal(t2, inst.times_prime))
        # general factors: rounding of the raw stamps is amplified by max|t| / min gap
        t3, _ = normalize_times(times * 10 ** rng.uniform(-3, 3), 1.0)
        cond = np.max(np.abs(times)) / np.min(np.diff(times))
        bound = 1e-9 + 32 * np.finfo(float).eps * cond
        worst["time_unit"] = max(worst["time_unit"], rel_err(t3, inst.times_prime) / bound)
    elapsed = time.perf_counter() - start
    ok = (worst["round_trip"] <= 1e-9 and worst["mean"] <= 1e-6 and worst["std"] <= 1e-6
          and gap_ok and worst["scale_shift"] <= 1e-6 and worst["time_unit"] <= 1.0
          and elapsed < 10)
    detail = " ".join(f"{k}={v:.1e}" for k, v in worst.items())
    verdict("C2", ok, f"{detail} exact_unit_gap_and_pow2_units={gap_ok} seconds={elapsed:.1f} "
                      "(tols 1e-9/1e-6/1e-6/1e-6, time_unit as fraction of 1e-9+32*eps*cond, limit 10)")


# -- C3 ----------------------------------------------------------------------

def test_c3_solver_contracts(verdict):
    store = ParamStore(make_rng(3))
    flow = FlowSolver(store, "f", 8, 16)
    for p in store.tensors.values():
        p.data = np.random.default_rng(4).standard_normal(p.shape) * 0.5
    z = np.random.default_rng(5).standard_normal((64, 8))
    identity = np.array_equal(flow.solve(Tensor(z), np.zeros((64, 1))).data, z)
    dts = np.random.default_rng(6).uniform(-10, 10, (64, 1))
    back = flow.solve(flow.solve(Tensor(z), dts), -dts).data
    inv = float(np.max(np.abs(back - z)))
    rng = np.random.default_rng(7)
    a = rng.standard_normal((6, 6)) * 0.5
    z0 = rng.standard_normal(6)
    rk = 0.0
    for dt in np.linspace(-2, 2, 21):
        out = rk4_integrate(lambda v: v @ a.T, Tensor(z0[None]), np.array([[dt]]), 64).data[0]
        ref = scipy.linalg.expm(a * dt) @ z0
        rk = max(rk, np.linalg.norm(out - ref) / np.linalg.norm(ref))
    verdict("C3", identity and inv < 1e-6 and rk < 1e-6,
            f"flow_identity_exact={identity} inverse_err={inv:.1e} (tol 1e-6) "
            f"rk4_vs_expm_rel={rk:.1e} (tol 1e-6)")


# -- C4 ----------------------------------------------------------------------

def test_c4_attention_contracts(verdict):
    stack = AttentionStack(ParamStore(make_rng(0)), 16, 2, 2, RotaryConfig(8))
    rng = np.random.default_rng(1)
    a = rng.standard_normal((2, 7, 16))
    tau = np.cumsum(rng.uniform(0.5, 3, (2, 7)), axis=1)
    mask = causal_mask(7)
    base = stack(Tensor(a), tau, mask).data
    leak = 0.0
    for j in range(1, 7):
        b = a.copy()
        b[:, j] += 10 * rng.standard_normal((2, 16))
        leak = max(leak, np.max(np.abs(stack(Tensor(b), tau, mask).data[:, :j] - base[:, :j])))
    shift = 0.0
    for s in (-1e4, -3.7, 0.5, 123.25, 9e3):
        for x, y in zip(stack.all_logits(Tensor(a), tau, mask),
                        stack.all_logits(Tensor(a), tau + s, mask)):
            shift = max(shift, np.max(np.abs(x - y)))
    x = rng.standard_normal((200, 16))
    taus = rng.uniform(-1e3, 1e3, 200)
    rot = rotary_modulate(Tensor(x), taus, RotaryConfig(16)).data
    norm = float(np.max(np.abs(np.linalg.norm(rot, axis=1) - np.linalg.norm(x, axis=1))))
    verdict("C4", leak <= 1e-12 and shift <= 1e-9 and norm <= 1e-12,
            f"causal_leak={leak:.1e} (tol 1e-12) tau_shift_logits={shift:.1e} (tol 1e-9) "
            f"rotary_norm={norm:.1e} (tol 1e-12)")


# -- C5 ----------------------------------------------------------------------

def test_c5_elbo_structure(verdict):
    rng = np.random.default_rng(5)
    # spread from near the prior (s ~ 0) to far from it (s ~ 1)
    kls = []
    for _ in range(1000):
        s = rng.uniform(0, 1) ** 3
        kls.append(kl_to_prior(rng.standard_normal(16) * 5 * s,
                               np.exp(rng.uniform(-8, 4, 16) * s)).item())
    kl_min = float(np.min(kls))
    kl_zero = abs(kl_to_prior(np.zeros(16), np.ones(16)).item())
    cfg = ModelConfig(patch_len=4, latent_dim=8, heads=2, head_dim=4, layers=2, solver_hidden=8)
    model = FlexTSF(cfg, seed=1)
    ds = make_synthetic("drop-masked sine", 4, (22, 30), seed=0)
    from flextsf.data import split_context_horizon
    from flextsf.vtnorm import fit_global
    mu, sd = fit_global(ds.series)["value"]
    ex = [make_example(*split_context_horizon(s), mu, sd, 1.0) for s in ds.series]
    r = model.forward(ex, sample=False)
    exact = ForwardResult(Tensor(np.where(r.target.observed, r.target.values, 0.0)), r.target,
                          r.kl, r.patch_valid, r.posterior_mu, r.posterior_var)
    nll_gap = abs(exact.nll().item() - HALF_LOG_2PI)
    moved = [Example(dataclasses.replace(e.context, values_prime=e.context.values + 3.0),
                     e.target) for e in ex]
    r2 = model.forward(moved, sample=False)
    crossed = ForwardResult(r.predictions, r2.target, r.kl, r.patch_valid,
                            r.posterior_mu, r.posterior_var)
    horizon_only = crossed.nll().item() == r.nll().item()
    verdict("C5", kl_min >= 0 and kl_zero <= 1e-12 and nll_gap <= 1e-9 and horizon_only,
            f"min_kl={kl_min:.2e} (>=0 over 1000) kl_at_prior={kl_zero:.1e} (tol 1e-12) "
            f"nll_exact_gap={nll_gap:.1e} (tol 1e-9) horizon_only_nll={horizon_only}")


# -- C6 ----------------------------------------------------------------------

def test_c6_end_to_end_learning(verdict, classic_runs):
    parts, ok = [], True
    for seed, (secs, rep) in classic_runs.items():
        lv, mean = rep.baselines["last-value"], rep.baselines["mean"]
        good = rep.mse < 0.5 * lv and rep.mse < mean and secs < 600
        ok &= good
        parts.append(f"seed{seed}: mse={rep.mse:.4f} 0.5*last={0.5 * lv:.4f} "
                     f"mean={mean:.4f} seconds={secs:.0f}")
    verdict("C6", ok, "; ".join(parts) + " (limit 600 s each)")


# -- C7 ----------------------------------------------------------------------

def pretrain_sines(seed: int, **flags) -> FlexTSF:
    source = make_synthetic("sine", 600, (60, 120), seed=seed)
    model = FlexTSF(ModelConfig.classic(**LEARN_MODEL, **flags), seed=seed)
    train(model, source, TrainRegime.pretrain(lr=3e-3, batch_size=16, epochs=20, patience=100,
                                              warmup_steps=50, seed=seed))
    return model


def shifted_sines(seed: int, n: int = 300):
    # hourly timestamps (3600x lower raw frequency), amplitudes over three decades,
    # offsets up to +-500
    return make_synthetic("scale-shifted sine", n, (60, 120), seed=seed, time_unit=3600.0,
                          name="shifted-sines")


@pytest.fixture(scope="module")
def pretrained():
    return pretrain_sines(0)


def test_c7_zero_shot(verdict, pretrained):
    target = shifted_sines(100)
    with_norm = zero_shot_eval(pretrained, target)
    without = zero_shot_eval(pretrain_sines(0, disable_vt_norm=True), target)
    mean = with_norm.baselines["mean"]
    ok = with_norm.mse < mean and not without.mse < without.baselines["mean"]
    verdict("C7", ok, f"zero_shot_mse={with_norm.mse:.4f} mean={mean:.4f} "
                      f"no_vt_norm_mse={without.mse:.4g} (must not beat mean)")


# -- C8 ----------------------------------------------------------------------

def test_c8_ablation_directions(verdict, classic_runs):
    irregular = irregular_corpus(0)
    base_irr = classic_runs[0][1]
    regime = TrainRegime.classic(seed=0, **LEARN_REGIME)
    model = FlexTSF(ModelConfig.classic(**LEARN_MODEL), seed=0)
    ivp = ablation_suite(irregular, model, regime, [AblationFlags(disable_ivp_patcher=True)],
                         base_irr)[1]
    mixed = make_synthetic("mixed-freq sine", 1000, (60, 120), seed=0)
    led = ablation_suite(mixed, FlexTSF(ModelConfig.classic(**LEARN_MODEL), seed=0), regime,
                         [AblationFlags(disable_led_extras=True)])
    ok = ivp.delta_pct > 0 and led[1].delta_pct > 0
    verdict("C8", ok, f"disable_ivp_patcher irregular: {base_irr.mse:.4f}->{ivp.mse:.4f} "
                      f"({ivp.delta_pct:+.1f}%) disable_led_extras mixed: "
                      f"{led[0].mse:.4f}->{led[1].mse:.4f} ({led[1].delta_pct:+.1f}%)")


# -- C9 ----------------------------------------------------------------------

def test_c9_few_shot(verdict, pretrained):
    before = pretrained.state_arrays()
    frozen, k0_match = True, True
    by_k = {10: [], 500: []}
    for seed in SEEDS:
        target = shifted_sines(200 + seed, n=700)
        zero = zero_shot_eval(pretrained, target, seed=seed)
        tuned = {}
        regime = TrainRegime.finetune(lr=3e-3, batch_size=16, epochs=10, patience=100, seed=seed)
        reports = few_shot_finetune(pretrained, target, [0, 10, 500], regime, keep=tuned)
        k0_match &= reports[0].to_dict() == zero.to_dict()
        for rep in reports[1:]:
            by_k[rep.k].append(rep.mse)
            after = tuned[rep.k].state_arrays()
            frozen &= all(np.array_equal(before[n], after[n]) for n in pretrained.core_group())
    frozen &= all(np.array_equal(v, pretrained.params[n].data) for n, v in before.items())
    m10, m500 = float(np.mean(by_k[10])), float(np.mean(by_k[500]))
    verdict("C9", frozen and k0_match and m500 <= m10,
            f"core_unchanged={frozen} k0_equals_zero_shot={k0_match} "
            f"mse_k10={m10:.4f} mse_k500={m500:.4f} (3-seed means, need k500<=k10)")


# -- C10 ---------------------------------------------------------------------

def test_c10_reproducibility(verdict, tmp_path):
    tiny = ["--patch_len", "4", "--latent_dim", "8", "--heads", "2", "--head_dim", "4",
            "--solver_hidden", "8", "--epochs", "2", "--batch_size", "8", "--lr", "0.003",
            "--seed", "11"]
    data = tmp_path / "data"
    assert cli_main(["synth", "--out_dir", str(data), "--n_series", "24", "--seed", "11"]) == 0
    csv_path = str(data / "data.csv")
    produced = {}
    for run in ("a", "b"):
        out = tmp_path / run
        for cmd in ("train", "ablate"):
            assert cli_main([cmd, "--out_dir", str(out / cmd), "--data", csv_path, *tiny]) == 0
        ckpt = str(out / "train" / "checkpoint.bin")
        for cmd in ("eval", "forecast", "finetune"):
            assert cli_main([cmd, "--out_dir", str(out / cmd), "--data", csv_path,
                             "--checkpoint", ckpt, "--ks", "0,5", *tiny]) == 0
        produced[run] = {str(p.relative_to(out)): p.read_bytes() for p in sorted(out.rglob("*"))
                         if p.suffix in {".txt", ".csv", ".bin", ".png"}}
    same = produced["a"] == produced["b"]
    verdict("C10", same and len(produced["a"]) >= 15,
            f"byte_identical={same} files_compared={len(produced['a'])}")


# -- C11 ---------------------------------------------------------------------

def test_c11_configuration_fidelity(verdict):
    cfg = ModelConfig.classic()
    shape = (cfg.head_dim, cfg.heads, cfg.layers, cfg.latent_dim)
    n = FlexTSF(cfg).count_parameters()
    ok = shape == (16, 4, 2, 64) and n == count_parameters(cfg)
    verdict("C11", ok, f"head_dim={shape[0]} heads={shape[1]} layers={shape[2]} d_z={shape[3]} "
                       f"params={n} reference_params={REFERENCE_PARAMS} "
                       f"ratio={n / REFERENCE_PARAMS:.3f} (informational)")
