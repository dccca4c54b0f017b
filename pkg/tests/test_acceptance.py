"""The eight acceptance criteria, one ``test_criterion_<k>_*`` group each.

Criteria 6-8 train toy models on the synthetic oracle dataset; those runs are
shared through the session-scoped ``toy_runs`` fixture. The terminal summary
prints one PASS/FAIL line per criterion.
"""
import time

import numpy as np
import pytest
import scipy.linalg
import torch

from conftest import NOTES

from singface.decoders import (
    BlinkParams,
    EyeNet,
    ExpressionNet,
    PoseNet,
    composite_eye,
    decompose_pose,
    integrate_pose,
    sample_blink_events,
)
from singface.encoder import AttentionModulator, AudioEncoder, ModulatedPair, TwoStreamEncoder
from singface.evaluation import cca_metric, roughness
from singface.losses import (
    Discriminator,
    attention_sparsity_loss,
    l1_loss,
    lsgan_losses,
    mmd_loss,
    mse_loss,
    regression_loss,
    velocity_loss,
)
from singface.model import ModelConfig, SingingFaceGenerator
from singface.nn import LstmState, Mlp, ResidualBlock1d, TemporalUNet, grad_check, lstm_step

D = torch.float64
N_INSTANCES = 20
GRAD_TOL = 1e-4


def report(k, msg):
    """Measured values; repeated under the criterion's line in the terminal summary."""
    NOTES.setdefault(k, []).append(msg)
    print(f"[criterion {k}] {msg}")


# -- 1. gradient correctness --------------------------------------------------------------


def _rand(g, *shape):
    return torch.randn(*shape, dtype=D, generator=g)


def _params(module):
    return list(module.parameters())


def _layer_cases():
    """name -> builder(seed) returning (scalar fn, tensors to check, mode)."""

    def mlp(seed):
        g = torch.Generator().manual_seed(seed)
        torch.manual_seed(seed)
        net = Mlp(5, 3, 4).to(D)
        x = _rand(g, 2, 5)
        w = _rand(g, 2, 3)
        return lambda: (net(x) * w).sum(), _params(net) + [x], "coordinates"

    def resblock(seed):
        g = torch.Generator().manual_seed(seed)
        torch.manual_seed(seed)
        block = ResidualBlock1d(3, 4, downsample=bool(seed % 2)).to(D).train()
        x = _rand(g, 3, 3, 7)
        w = _rand(g, 3, 4, 4 if seed % 2 else 7)
        return lambda: (block(x) * w).sum(), _params(block) + [x], "coordinates"

    def lstm(seed):
        g = torch.Generator().manual_seed(seed)
        torch.manual_seed(seed)
        cell = torch.nn.LSTM(4, 3, batch_first=True).to(D)
        xs = _rand(g, 3, 2, 4)
        w = _rand(g, 3)

        def fn():
            s = LstmState.zeros(2, 3, D)
            total = 0.0
            for x in xs:
                o, s = lstm_step(x, s, cell)
                total = total + (o * w).sum()
            return total

        return fn, _params(cell) + [xs], "coordinates"

    def unet(seed):
        g = torch.Generator().manual_seed(seed)
        torch.manual_seed(seed)
        net = TemporalUNet(6, (5, 4, 3)).to(D)
        x = _rand(g, 1, 6, 9)
        w = _rand(g, 1, 5, 9)
        return lambda: (net(x) * w).sum(), _params(net) + [x], "coordinates"

    def audio_encoder(seed):
        g = torch.Generator().manual_seed(seed)
        torch.manual_seed(seed)
        enc = AudioEncoder(4, width=0.125, embed_dim=6).to(D).train()
        x = _rand(g, 3, 39, 4)
        w = _rand(g, 3, 6)
        return lambda: (enc(x) * w).sum(), _params(enc) + [x], "directions"

    def atm(seed):
        g = torch.Generator().manual_seed(seed)
        torch.manual_seed(seed)
        mod = AttentionModulator("pose", 8).to(D)
        mod.unet = TemporalUNet(8, (6, 4, 4)).to(D)
        mod.fc = torch.nn.Linear(6, 8).to(D)
        fv, fb = _rand(g, 1, 10, 4), _rand(g, 1, 10, 4)
        w = _rand(g, 1, 10, 8)
        return lambda: (mod(fv, fb)[1].joined() * w).sum(), _params(mod) + [fv, fb], "coordinates"

    def egn(seed):
        g = torch.Generator().manual_seed(seed)
        torch.manual_seed(seed)
        net = ExpressionNet(8).to(D)
        pair = ModulatedPair(_rand(g, 1, 5, 4), _rand(g, 1, 5, 4), "exp")
        w = _rand(g, 1, 5, 64)
        return lambda: (net(pair) * w).sum(), _params(net) + [pair.l, pair.m], "directions"

    def pgn(seed):
        g = torch.Generator().manual_seed(seed)
        torch.manual_seed(seed)
        net = PoseNet(8).to(D)
        pair = ModulatedPair(_rand(g, 1, 6, 4), _rand(g, 1, 6, 4), "pose")
        p0 = _rand(g, 1, 6)
        w = _rand(g, 1, 6, 6)
        return lambda: (net(pair, p0)[2] * w).sum(), _params(net) + [pair.l, pair.m, p0], "directions"

    def esgn(seed):
        g = torch.Generator().manual_seed(seed)
        torch.manual_seed(seed)
        net = EyeNet(8).to(D)
        pair = ModulatedPair(_rand(g, 1, 7, 4), _rand(g, 1, 7, 4), "eye")
        w = _rand(g, 1, 7)
        return lambda: (net(pair, clamp=False) * w).sum(), _params(net) + [pair.l, pair.m], "directions"

    def discriminator(seed):
        g = torch.Generator().manual_seed(seed)
        torch.manual_seed(seed)
        disc = Discriminator(5).to(D).train()
        x = _rand(g, 2, 16, 5)
        w = _rand(g, 2, 2)
        return lambda: (disc(x) * w).sum(), _params(disc) + [x], "directions"

    return {"dense/mlp": mlp, "residual block": resblock, "lstm": lstm, "u-net": unet,
            "audio encoder": audio_encoder, "attention modulator": atm, "egn": egn, "pgn": pgn,
            "esgn": esgn, "discriminator": discriminator}


def _loss_cases():
    def pair_inputs(seed, shape):
        g = torch.Generator().manual_seed(seed)
        return _rand(g, *shape), _rand(g, *shape)

    def mse(seed):
        a, b = pair_inputs(seed, (6, 3))
        return lambda: mse_loss(a, b), [a, b], "coordinates"

    def l1(seed):
        a, b = pair_inputs(seed, (6, 3))
        return lambda: l1_loss(a, b), [a, b], "coordinates"

    def velocity(seed):
        a, b = pair_inputs(seed, (2, 6, 3))
        return lambda: velocity_loss(a, b), [a, b], "coordinates"

    def mmd(seed):
        g = torch.Generator().manual_seed(seed)
        a, b = _rand(g, 7, 2), _rand(g, 6, 2) + 0.5
        return lambda: mmd_loss(a, b), [a, b], "coordinates"

    def att(seed):
        g = torch.Generator().manual_seed(seed)
        masks = [torch.rand(1, 4, 6, dtype=D, generator=g) for _ in range(3)]
        return lambda: attention_sparsity_loss(masks), masks, "coordinates"

    def lsgan(seed):
        r, f = pair_inputs(seed, (4,))
        return lambda: sum(lsgan_losses(r, f)), [r, f], "coordinates"

    def regression(seed):
        g = torch.Generator().manual_seed(seed)
        gt = {"expr": _rand(g, 1, 5, 64), "pose": _rand(g, 1, 5, 6), "eye_long": torch.rand(1, 5, dtype=D, generator=g)}
        pred = {"expr": _rand(g, 1, 5, 64), "pose": _rand(g, 1, 5, 6), "vel": _rand(g, 1, 4, 6),
                "eye_long": torch.rand(1, 5, dtype=D, generator=g)}
        masks = [torch.rand(1, 5, 8, dtype=D, generator=g) for _ in range(3)]
        tensors = [pred["expr"], pred["pose"], pred["vel"], pred["eye_long"], *masks]
        return lambda: regression_loss(gt, pred, masks)[0], tensors, "directions"

    return {"mse": mse, "l1": l1, "velocity": velocity, "mmd": mmd, "attention sparsity": att,
            "lsgan": lsgan, "regression total": regression}


def _run_cases(cases):
    worst = {}
    for name, build in cases.items():
        errs = []
        for seed in range(N_INSTANCES):
            fn, tensors, mode = build(seed)
            rep = grad_check(fn, tensors, tolerance=GRAD_TOL, h=1e-6, mode=mode, n_directions=6, seed=seed)
            assert rep.n_checked > 0, name
            errs.append(rep.max_rel_error)
        worst[name] = max(errs)
    return worst


@pytest.fixture(scope="module")
def gradient_results():
    t0 = time.perf_counter()
    layers = _run_cases(_layer_cases())
    losses = _run_cases(_loss_cases())
    return layers, losses, time.perf_counter() - t0


def test_criterion_1_layers(gradient_results):
    layers, _, _ = gradient_results
    for name, err in layers.items():
        report(1, f"layer {name}: worst relative error {err:.2e} over {N_INSTANCES} instances")
    assert all(err <= GRAD_TOL for err in layers.values()), layers


def test_criterion_1_losses(gradient_results):
    _, losses, _ = gradient_results
    for name, err in losses.items():
        report(1, f"loss {name}: worst relative error {err:.2e} over {N_INSTANCES} instances")
    assert all(err <= GRAD_TOL for err in losses.values()), losses


def test_criterion_1_runtime(gradient_results):
    seconds = gradient_results[2]
    report(1, f"gradient checks took {seconds:.1f} s")
    assert seconds < 120


# -- 2. shape conformance ------------------------------------------------------------------------


def test_criterion_2_audio_encoder_trace():
    enc = AudioEncoder(26, 1.0).eval()
    trace = dict(enc.trace(torch.randn(2, 39, 26)))
    lengths = [trace[k].shape[-1] for k in ("conv", "res1", "res3", "res5", "res7")]
    assert lengths == [39, 20, 10, 5, 3]
    assert trace["flatten"].shape == (2, 1536)
    assert trace["fc768"].shape == (2, 768)


def test_criterion_2_lstm_width():
    assert PoseNet().lstm.input_size == 268
    assert SingingFaceGenerator(ModelConfig(2)).pgn.lstm.input_size == 268


def test_criterion_2_atm_input():
    mod = AttentionModulator("exp")
    seen = {}

    def record(module, args):
        seen["x"] = args[0].shape

    mod.unet.register_forward_pre_hook(record)
    att, _ = mod(torch.randn(1, 128, 128), torch.randn(1, 128, 128))
    assert tuple(seen["x"]) == (1, 256, 128)  # channels x time: 128 frames by 256 channels
    assert att.shape == (1, 128, 256)


def test_criterion_2_discriminator_lengths():
    trace = Discriminator().eval().trace(torch.randn(1, 128, 59))
    assert [h.shape[-1] for _, h in trace] == [64, 32, 16, 8, 8, 8]


# -- 3. algebraic identities --------------------------------------------------------------------


def test_criterion_3_integrate_round_trip():
    rng = np.random.default_rng(0)
    for _ in range(50):
        T = int(rng.integers(2, 300))
        # ground-truth tracks are stored as float32 values
        track = np.cumsum(rng.standard_normal((T, 6)) * rng.uniform(1e-3, 10), axis=0).astype(np.float32)
        track[rng.random(T) < 0.1] = track[0]  # repeated poses give zero steps
        track = track.astype(np.float64)
        p0, s, d = decompose_pose(track)
        assert np.array_equal(np.vstack([p0, integrate_pose(p0, s, d)]), track)
    report(3, "integrate_pose(decompose_pose(p)) == p bitwise in float64 on 50 random float32-valued tracks")


def test_criterion_3_composite():
    rng = np.random.default_rng(1)
    for _ in range(50):
        blink = (rng.random(100) < 0.2).astype(float)
        long = np.where(rng.random(100) < 0.5, 0.0, rng.random(100))
        out = composite_eye(blink, long)
        assert np.array_equal(out, np.where(long > 0, long, blink))


def test_criterion_3_output_ranges():
    torch.manual_seed(0)
    gen = SingingFaceGenerator(ModelConfig(2, width=0.25)).eval()
    with torch.no_grad():
        out = gen(torch.randn(2, 40, 39, 26) * 5, torch.randn(2, 40, 39, 26) * 5, torch.tensor([0, 1]),
                  torch.randn(2, 6))
    assert torch.all(out["speed"] >= 0)
    assert torch.all(out["dirs"].abs() <= 1)
    for a in out["att"].values():
        assert torch.all((a > 0) & (a < 1))


# -- 4. metric oracles ----------------------------------------------------------------------------


def _cca_oracle(x, y):
    x = x - x.mean(0)
    y = y - y.mean(0)
    dx, dy = x.shape[1], y.shape[1]
    A = np.block([[np.zeros((dx, dx)), x.T @ y], [y.T @ x, np.zeros((dy, dy))]])
    B = scipy.linalg.block_diag(x.T @ x, y.T @ y)
    return float(scipy.linalg.eigh(A, B, eigvals_only=True)[-1])


def test_criterion_4_cca_oracle():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for i in range(50):
        d = 1 + i % 3
        T = int(rng.integers(20, 200))
        x = rng.standard_normal((T, d))
        y = x @ rng.standard_normal((d, d)) * rng.uniform(0, 1) + rng.standard_normal((T, d))
        worst = max(worst, abs(cca_metric(x, y) - _cca_oracle(x, y)))
    report(4, f"CCA vs generalized eigenproblem: max |diff| {worst:.1e} over 50 instances")
    assert worst <= 1e-8


def test_criterion_4_roughness_and_losses():
    t = np.arange(20.0)
    assert roughness(np.full((20, 3), 1.3)) == 0.0
    assert roughness(np.stack([0.5 * t, -t, 2 * t], axis=1)) == 0.0
    assert roughness(np.array([0.0, 1, 4, 9, 16])) == pytest.approx(2.4, abs=1e-12)
    x = torch.randn(30, 6, dtype=D)
    assert float(velocity_loss(x, x + torch.randn(6, dtype=D))) == pytest.approx(0.0, abs=1e-12)
    assert float(mmd_loss(x, x.clone())) <= 1e-9


# -- 5. blink sampler ------------------------------------------------------------------------------


def test_criterion_5_blink_statistics():
    t0 = time.perf_counter()
    intervals, durations = sample_blink_events(10_000, BlinkParams(), rng=123)
    seconds = time.perf_counter() - t0
    assert np.all((intervals >= 1.2) & (intervals <= 2.0))
    assert np.all((durations >= 0.10) & (durations <= 0.45))
    report(5, f"mean interval {intervals.mean():.4f} s, mean duration {durations.mean():.4f} s, {seconds:.2f} s")
    assert abs(intervals.mean() - 1.6) <= 0.02 * 1.6
    assert abs(durations.mean() - 0.275) <= 0.02 * 0.275
    assert seconds < 10


# -- 6. learnability -------------------------------------------------------------------------------


def test_criterion_6_learnability(toy_runs):
    run = toy_runs.get(0, "two_stream")
    n_train, n_test = len(toy_runs.split[0]), len(toy_runs.split[1])
    report(6, f"{n_train} train / {n_test} held-out sequences, {run.trainer.step} steps, {run.seconds:.0f} s")
    report(6, f"L_exp on the first batch {run.log[0]['l_exp']:.3f} -> {run.final_first_batch['l_exp']:.3f} (ratio {run.l_exp_ratio:.3f})")
    report(6, f"held-out cca_pose_speed {run.mean.cca_pose_speed:.3f}")
    assert n_train + n_test >= 5
    assert run.trainer.step == 200
    assert run.l_exp_ratio < 0.1
    assert run.mean.cca_pose_speed >= 0.6
    assert run.seconds < 15 * 60


# -- 7. decouple-and-fuse ---------------------------------------------------------------------------


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_criterion_7_two_stream_beats_single_stream(toy_runs, seed):
    two = toy_runs.get(seed, "two_stream")
    one = toy_runs.get(seed, "single_stream")
    report(7, f"seed {seed}: cca_pose_speed two-stream {two.mean.cca_pose_speed:.3f}, "
              f"single-stream {one.mean.cca_pose_speed:.3f}")
    assert two.mean.cca_pose_speed > one.mean.cca_pose_speed


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_criterion_7_pose_attention_prefers_music_in_silence(toy_runs, seed):
    run = toy_runs.get(seed, "two_stream")
    n_silent = sum(int(m.sum()) for m in run.silent_masks.values())
    voice, music = run.pose_attention_when_silent()
    report(7, f"seed {seed}: {n_silent} voice-silent frames, pose attention voice {voice:.4f} music {music:.4f}")
    assert n_silent > 0
    assert music > voice


# -- 8. reproducibility -------------------------------------------------------------------------------


def test_criterion_8_reproducible(toy_runs):
    a = toy_runs.get(0, "two_stream", tag="a")
    b = toy_runs.get(0, "two_stream", tag="b")
    fa = (toy_runs.root / "two_stream_s0_a" / "final.pt")
    fb = (toy_runs.root / "two_stream_s0_b" / "final.pt")
    report(8, f"checkpoint hashes {a.checkpoint_hash[:16]} / {b.checkpoint_hash[:16]}")
    assert a.checkpoint_hash == b.checkpoint_hash
    assert a.log == b.log
    assert a.reports == b.reports
    assert a.mean == b.mean
    assert fa.read_bytes() == fb.read_bytes()
