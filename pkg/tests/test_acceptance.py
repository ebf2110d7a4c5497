"""Acceptance suite: one test per criterion, each printing a verdict line.

Run with `pytest tests/test_acceptance.py -v -s`. The desk-scale training
criterion is marked `slow`; deselect with `-m "not slow"` for a quick pass.
"""
import json

import numpy as np
import pytest

from banet.analysis import branch_importance, capture_traces, fit_forest, gini_importance
from banet.attention import BridgeAttention, BridgeSourceConfig, SqueezeExcite
from banet.backbones import (ArchSpec, BlockSpec, StageSpec, StemSpec,
                             arch_to_json, build_block, build_network,
                             count_flops, count_params, load_checkpoint,
                             resnet20, resnet50, resnet101, save_checkpoint)
from banet.cli import main as cli_main
from banet.tensor import (RunningStats, Tensor, add, add_bias, apply_attention,
                          backward, batchnorm, conv2d, cross_entropy,
                          global_avg_pool, matmul, maxpool2d, mul, no_grad,
                          relu, scale, sigmoid, sum_all)
from banet.training import (FormatError, TrainConfig, load_cifar10,
                            predict_logits, topk_accuracy, train)
from helpers import (batchnorm_oracle, conv2d_oracle, finite_diff_grads,
                     frozen_forward_scalar, max_rel_err, tiny_arch,
                     topk_oracle, write_cifar_dir)

TABLE2 = {
    ("resnet50", "none"): (25.56e6, 4.12e9),
    ("resnet50", "se"): (28.07e6, 4.13e9),
    ("resnet50", "ba"): (28.71e6, 4.13e9),
    ("resnet101", "none"): (44.55e6, 7.85e9),
    ("resnet101", "se"): (49.29e6, 7.86e9),
    ("resnet101", "ba"): (50.49e6, 7.87e9),
}


def report(criterion: str, ok: bool, detail: str) -> None:
    print(f"[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}")
    assert ok, f"{criterion}: {detail}"


# ---------------------------------------------------------------------------
# Shared desk-scale artifacts


@pytest.fixture(scope="module")
def desk_data(tmp_path_factory):
    path = tmp_path_factory.mktemp("desk_cifar")
    write_cifar_dir(path, n_train=5000, n_test=500, seed=11)
    return str(path)


@pytest.fixture(scope="module")
def smoke_data(tmp_path_factory):
    path = tmp_path_factory.mktemp("smoke_cifar")
    write_cifar_dir(path, n_train=512, n_test=128, seed=12)
    return str(path)


@pytest.fixture(scope="module")
def desk_runs(desk_data):
    """Three full 30-epoch ResNet-20 runs, one per attention kind."""
    train_set, test_set = load_cifar10(desk_data)
    cfg = TrainConfig(epochs=30, batch_size=128, seed=7)
    runs = {}
    for kind in ("none", "se", "ba"):
        net = build_network(resnet20(), attention=kind, dtype=np.float32, seed=7)
        print(f"--- desk run: attention={kind}")
        history = train(net, train_set, test_set, cfg, log=print)
        runs[kind] = (net, history)
    return runs


# ---------------------------------------------------------------------------
# Criterion 1 — cost table reproduction


class TestCriterion1Costs:
    def test_table_reproduction(self):
        worst = ""
        for (name, kind), (p_want, f_want) in TABLE2.items():
            arch = resnet50() if name == "resnet50" else resnet101()
            net = build_network(arch, attention=kind, dtype=np.float32)
            p, f = count_params(net), count_flops(net)
            p_err = abs(p - p_want) / p_want
            f_err = abs(f - f_want) / f_want
            assert p_err <= 0.005, f"{name}/{kind} params {p} vs {p_want}"
            assert f_err <= 0.010, f"{name}/{kind} flops {f} vs {f_want}"
            worst = max(worst, f"params {p_err:.3%} flops {f_err:.3%}")
        assert cli_main(["count", "--arch", "resnet50", "--attention", "all"]) == 0
        assert cli_main(["count", "--arch", "resnet101", "--attention", "all"]) == 0
        report("criterion 1 (cost table)", True,
               f"6 rows within 0.5%/1% tolerance (worst {worst})")


# ---------------------------------------------------------------------------
# Criterion 2 — SE degeneration equivalence


class TestCriterion2Degeneration:
    def test_block_equivalence_100_inputs(self):
        se_spec = BlockSpec("bottleneck", 32, 16, 64, attention="se", downsample=True)
        ba_spec = BlockSpec("bottleneck", 32, 16, 64, attention="ba", downsample=True,
                            bridge_sources=BridgeSourceConfig.all_for(3))
        se_blk = build_block(se_spec, reduction=16, seed=21, dtype=np.float64)
        ba_blk = build_block(ba_spec, reduction=16, seed=21, dtype=np.float64)
        for layer in ("conv1", "conv2", "conv3", "ds_conv"):
            getattr(ba_blk, layer).w.data[...] = getattr(se_blk, layer).w.data
        ba_blk.att.zero_bridges()
        ba_blk.att.branches[-1].w.data[...] = se_blk.att.w1.data
        ba_blk.att.w2.data[...] = se_blk.att.w2.data
        ba_blk.att.b2.data[...] = se_blk.att.b2.data

        rng = np.random.default_rng(22)
        worst = 0.0
        with no_grad():
            for _ in range(100):
                x = Tensor(rng.standard_normal((2, 32, 7, 7)))
                got = ba_blk.forward(x, "eval").data
                want = se_blk.forward(x, "eval").data
                worst = max(worst, float(np.max(np.abs(got - want))))
        report("criterion 2 (SE degeneration)", worst < 1e-6,
               f"max |BA - SE| = {worst:.2e} over 100 inputs (tolerance 1e-6)")


# ---------------------------------------------------------------------------
# Criterion 3 — gradient suite


def _fd_check(build_loss, params, tol=1e-4, h=1e-5):
    """build_loss() -> scalar Tensor; returns worst relative error."""
    from banet.tensor import tape
    tape().reset()
    for p in params:
        p.zero_grad()
    backward(build_loss())

    def f():
        with no_grad():
            return float(build_loss().data)

    fd = finite_diff_grads(f, [p.data for p in params], h=h)
    worst = 0.0
    for p, ref in zip(params, fd):
        worst = max(worst, max_rel_err(p.grad, ref))
    return worst


class TestCriterion3Gradients:
    def test_every_primitive(self, rng):
        worst = {}
        x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        w = Tensor(rng.standard_normal((4, 5)), requires_grad=True)
        mix = Tensor(rng.standard_normal((3, 5)))
        worst["matmul"] = _fd_check(lambda: sum_all(mul(matmul(x, w), mix)), [x, w])

        xc = Tensor(rng.standard_normal((2, 3, 6, 6)), requires_grad=True)
        wc = Tensor(rng.standard_normal((4, 3, 3, 3)) * 0.5, requires_grad=True)
        worst["conv2d_s1"] = _fd_check(lambda: sum_all(conv2d(xc, wc, 1, 1)), [xc, wc])
        worst["conv2d_s2"] = _fd_check(lambda: sum_all(conv2d(xc, wc, 2, 1)), [xc, wc])

        xg = Tensor(rng.standard_normal((2, 5, 4, 4)), requires_grad=True)
        mixg = Tensor(rng.standard_normal((2, 5)))
        worst["global_avg_pool"] = _fd_check(
            lambda: sum_all(mul(global_avg_pool(xg), mixg)), [xg])

        xr = Tensor(rng.standard_normal(40) + 0.05, requires_grad=True)
        worst["relu"] = _fd_check(lambda: sum_all(relu(xr)), [xr])

        xs = Tensor(rng.standard_normal(40) * 2, requires_grad=True)
        worst["sigmoid"] = _fd_check(lambda: sum_all(sigmoid(xs)), [xs])

        for shape, tag in (((8, 6), "bn_rank2"), ((3, 4, 5, 5), "bn_rank4")):
            feats = shape[1]
            xb = Tensor(rng.standard_normal(shape), requires_grad=True)
            gm = Tensor(rng.uniform(0.5, 1.5, feats), requires_grad=True)
            bt = Tensor(rng.standard_normal(feats), requires_grad=True)
            mixb = Tensor(rng.standard_normal(shape))
            worst[tag] = _fd_check(
                lambda: sum_all(mul(batchnorm(xb, gm, bt, None, "train"), mixb)),
                [xb, gm, bt])
            state = RunningStats(feats)
            state.mean[...] = rng.standard_normal(feats) * 0.2
            state.var[...] = rng.uniform(0.5, 2.0, feats)
            worst[tag + "_eval"] = _fd_check(
                lambda: sum_all(mul(batchnorm(xb, gm, bt, state, "eval"), mixb)),
                [xb, gm, bt])

        xm = Tensor(rng.standard_normal((2, 3, 6, 6)), requires_grad=True)
        worst["maxpool2d"] = _fd_check(lambda: sum_all(maxpool2d(xm, 3, 2, 1)), [xm])

        xa = Tensor(rng.standard_normal((2, 4, 3, 3)), requires_grad=True)
        wa = Tensor(rng.uniform(0.1, 0.9, (2, 4)), requires_grad=True)
        worst["apply_attention"] = _fd_check(
            lambda: sum_all(apply_attention(xa, wa)), [xa, wa])

        xl = Tensor(rng.standard_normal((4, 6)), requires_grad=True)
        labels = np.array([0, 5, 2, 3])
        worst["cross_entropy"] = _fd_check(lambda: cross_entropy(xl, labels), [xl])

        a1 = Tensor(rng.standard_normal(8), requires_grad=True)
        a2 = Tensor(rng.standard_normal(8), requires_grad=True)
        worst["add_mul_scale"] = _fd_check(
            lambda: sum_all(scale(mul(add(a1, a2), a1), 1.3)), [a1, a2])
        xb2 = Tensor(rng.standard_normal((3, 5)), requires_grad=True)
        bb = Tensor(rng.standard_normal(5), requires_grad=True)
        worst["add_bias"] = _fd_check(lambda: sum_all(add_bias(xb2, bb)), [xb2, bb])

        bad = {k: v for k, v in worst.items() if v > 1e-4}
        report("criterion 3 (primitive gradients)", not bad,
               f"max rel err {max(worst.values()):.2e} over {len(worst)} primitives"
               + (f"; failures {bad}" if bad else ""))

    def test_two_block_ba_network(self, rng):
        net = build_network(tiny_arch("ba"), reduction=4, seed=33, dtype=np.float64)
        x = Tensor(rng.standard_normal((2, 3, 6, 6)))
        labels = np.array([1, 2])

        from banet.tensor import tape
        tape().reset()
        backward(cross_entropy(net.forward(x, "train"), labels))

        def f():
            return frozen_forward_scalar(
                net, lambda: float(cross_entropy(net.forward(x, "train"), labels).data))

        params = net.parameters()
        fd = finite_diff_grads(f, [p.tensor.data for p in params])
        worst = 0.0
        for p, ref in zip(params, fd):
            worst = max(worst, max_rel_err(p.tensor.grad, ref))
        report("criterion 3 (2-block BA network)", worst <= 1e-4,
               f"max rel err {worst:.2e} over {sum(p.tensor.data.size for p in params)} "
               f"parameters (tolerance 1e-4)")


# ---------------------------------------------------------------------------
# Criterion 4 — desk-scale training


@pytest.mark.slow
class TestCriterion4DeskTraining:
    def test_three_kinds_train_and_reduce_loss(self, desk_runs):
        details = []
        for kind, (net, history) in desk_runs.items():
            losses = [r.train_loss for r in history.records]
            assert all(np.isfinite(losses)), f"{kind}: non-finite loss"
            ratio = losses[0] / losses[-1]
            details.append(f"{kind}: {losses[0]:.3f}->{losses[-1]:.3f} ({ratio:.1f}x)")
            assert ratio >= 5.0, f"{kind}: loss reduction {ratio:.2f}x < 5x"
        report("criterion 4a (desk training)", True, "; ".join(details))

    def test_trained_attention_weights_in_range(self, desk_runs, desk_data):
        _, test_set = load_cifar10(desk_data)
        violations = 0
        for kind in ("se", "ba"):
            net, _ = desk_runs[kind]
            traces = capture_traces(net, test_set.subset(256))
            for t in traces:
                violations += int(np.sum((t.omega <= 0) | (t.omega >= 1)))
        report("criterion 5 (range, trained nets)", violations == 0,
               f"{violations} attention weights outside (0,1) on trained runs")

    def test_class_variance_comparison_report(self, desk_runs, desk_data):
        # report, not assert: later-block per-class weight spread, BA vs SE
        _, test_set = load_cifar10(desk_data)
        lines = []
        for kind in ("se", "ba"):
            net, _ = desk_runs[kind]
            traces = capture_traces(net, test_set.subset(256))
            last = traces[-1]
            labels = test_set.subset(256).labels
            means = [last.omega[labels == c].mean(axis=0)
                     for c in range(10) if (labels == c).any()]
            spread = np.var(np.stack(means), axis=0).mean()
            lines.append(f"{kind}: across-class variance {spread:.3e}")
        print("[REPORT] last-block per-class attention spread — " + "; ".join(lines))

    def test_compare_table1_style(self, smoke_data, tmp_path, capsys):
        arch = ArchSpec(
            "minib", StemSpec(8, 3, 1, 1),
            [StageSpec(2, BlockSpec("bottleneck", 8, 4, 8, downsample=True))],
            num_classes=10, input_shape=(3, 32, 32))
        arch_path = str(tmp_path / "minib.json")
        arch_to_json(arch, arch_path)
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps({"epochs": 2, "batch_size": 64, "seed": 9}))
        out = tmp_path / "cmp"
        code = cli_main(["compare", "--archs",
                         f"{arch_path}:se",
                         f"{arch_path}:ba:conv1",
                         f"{arch_path}:ba:conv2",
                         f"{arch_path}:ba:conv1+conv2",
                         "--data", smoke_data, "--config", str(cfg_path),
                         "--reduction", "2", "--out", str(out)])
        stdout = capsys.readouterr().out
        lines = (out / "compare.csv").read_text().strip().splitlines()
        ok = (code == 0 and lines[0] == "config,top1" and len(lines) == 5
              and "shared data order verified" in stdout)
        with capsys.disabled():
            report("criterion 4b (compare report)", ok,
                   f"4-row report, batch hashes match ({lines[1:]})" if ok
                   else f"exit {code}, lines {lines}")


# ---------------------------------------------------------------------------
# Criterion 5 — attention range invariant (randomized sweep)


class TestCriterion5Range:
    def test_randomized_modules_strictly_open(self, rng):
        violations = 0
        checked = 0
        for seed in range(25):
            gen = np.random.default_rng(seed)
            scale_w = 10.0 ** gen.uniform(-2, 2)
            se = SqueezeExcite(16, 4, rng=gen, dtype=np.float64)
            se.w1.data *= scale_w
            se.w2.data *= scale_w
            w = se.attention(Tensor(gen.standard_normal((4, 16, 5, 5)) * 10)).data
            violations += int(np.sum((w <= 0) | (w >= 1)))
            checked += w.size

            ba = BridgeAttention([8, 16], 16, 4, rng=gen, dtype=np.float64)
            for br in ba.branches:
                br.w.data *= scale_w
            ba.w2.data *= scale_w
            feats = [Tensor(gen.standard_normal((4, 8, 6, 6)) * 10),
                     Tensor(gen.standard_normal((4, 16, 3, 3)) * 10)]
            w = ba.attention(feats, "train").data
            violations += int(np.sum((w <= 0) | (w >= 1)))
            checked += w.size
        report("criterion 5 (attention range)", violations == 0,
               f"{violations} violations in {checked} sampled weights, incl. "
               "extreme parameter scales")


# ---------------------------------------------------------------------------
# Criterion 6 — importance recovery


class TestCriterion6Importance:
    def _trace_block_with_single_active_branch(self, active=1, n=240):
        spec = BlockSpec("bottleneck", 8, 4, 8, attention="ba",
                         bridge_sources=BridgeSourceConfig.all_for(3))
        blk = build_block(spec, reduction=2, seed=61, dtype=np.float64)
        for i, br in enumerate(blk.att.branches):
            if i != active:
                br.w.data.fill(0.0)
            br.norm.set_identity()
        rng = np.random.default_rng(62)
        raw = []
        with no_grad():
            for start in range(0, n, 60):
                blk.forward(Tensor(rng.standard_normal((60, 8, 5, 5))), "eval",
                            trace=raw, block_id=0)
        from banet.analysis import AttentionTrace
        branches = [np.concatenate([e.branches[i] for e in raw]) for i in range(3)]
        return AttentionTrace(0, branches, np.concatenate([e.omega for e in raw]))

    def test_branch2_recovery_and_normalization(self):
        trace = self._trace_block_with_single_active_branch(active=1)
        report_a = branch_importance([trace], seed=5)
        report_b = branch_importance([trace], seed=5)
        shares = report_a.blocks[0].shares
        ok = (shares[1] >= 0.8
              and abs(shares.sum() - 1.0) <= 1e-9
              and np.array_equal(shares, report_b.blocks[0].shares))
        report("criterion 6 (importance recovery)", ok,
               f"branch shares {np.round(shares, 4).tolist()}, "
               f"sum={shares.sum():.10f}, deterministic under seed")


# ---------------------------------------------------------------------------
# Criterion 7 — oracle equivalences, 100+ randomized cases each


class TestCriterion7Oracles:
    def test_conv2d_vs_sliding_window(self, rng):
        worst = 0.0
        for case in range(100):
            b = int(rng.integers(1, 3))
            ci = int(rng.integers(1, 4))
            co = int(rng.integers(1, 4))
            k = int(rng.choice([1, 3]))
            stride = int(rng.integers(1, 3))
            pad = int(rng.integers(0, 2))
            h = int(rng.integers(max(1, k - 2 * pad), 8))
            w_ = int(rng.integers(max(1, k - 2 * pad), 8))
            x = rng.standard_normal((b, ci, h, w_))
            w = rng.standard_normal((co, ci, k, k))
            got = conv2d(Tensor(x), Tensor(w), stride, pad).data
            worst = max(worst, float(np.max(np.abs(
                got - conv2d_oracle(x, w, stride, pad)))))
        report("criterion 7 (conv2d oracle)", worst < 1e-11,
               f"100 randomized cases, max abs diff {worst:.2e}")

    def test_batchnorm_vs_two_pass(self, rng):
        worst = 0.0
        for case in range(100):
            if case % 2:
                shape = (int(rng.integers(2, 9)), int(rng.integers(1, 7)))
            else:
                shape = (int(rng.integers(2, 5)), int(rng.integers(1, 5)),
                         int(rng.integers(1, 6)), int(rng.integers(1, 6)))
            feats = shape[1]
            x = rng.standard_normal(shape) * rng.uniform(0.5, 3)
            gamma = rng.standard_normal(feats)
            beta = rng.standard_normal(feats)
            got = batchnorm(Tensor(x), Tensor(gamma), Tensor(beta), None, "train").data
            worst = max(worst, float(np.max(np.abs(
                got - batchnorm_oracle(x, gamma, beta)))))
        report("criterion 7 (batchnorm oracle)", worst < 1e-10,
               f"100 randomized cases, max abs diff {worst:.2e}")

    def test_evaluate_vs_sort_oracle(self, rng):
        mismatches = 0
        for _ in range(100):
            n = int(rng.integers(4, 40))
            k_classes = int(rng.integers(6, 12))
            logits = rng.standard_normal((n, k_classes))
            logits[rng.random(logits.shape) < 0.25] = 0.0  # force ties
            labels = rng.integers(0, k_classes, n)
            for k in (1, 5):
                if topk_accuracy(logits, labels, k) != topk_oracle(logits, labels, k):
                    mismatches += 1
        report("criterion 7 (evaluate oracle)", mismatches == 0,
               f"100 randomized cases x top1/top5, {mismatches} mismatches")


# ---------------------------------------------------------------------------
# Criterion 8 — format round-trips


class TestCriterion8Formats:
    def test_checkpoint_roundtrip_bit_exact(self, rng, tmp_path):
        net = build_network(resnet20(), attention="ba", dtype=np.float32, seed=81)
        x = rng.standard_normal((4, 3, 32, 32)).astype(np.float32)
        before = predict_logits(net, x)
        path = str(tmp_path / "net.ckpt")
        save_checkpoint(net, path)
        clone = build_network(resnet20(), attention="ba", dtype=np.float32, seed=123)
        load_checkpoint(clone, path)
        after = predict_logits(clone, x)
        ok = np.array_equal(before, after)
        report("criterion 8 (checkpoint round-trip)", ok,
               "eval logits bit-identical after save/load")

    def test_truncated_cifar_rejected(self, tmp_path):
        write_cifar_dir(tmp_path, n_train=4, n_test=2)
        f = tmp_path / "data_batch_1.bin"
        f.write_bytes(f.read_bytes()[:-100])
        with pytest.raises(FormatError, match="3073"):
            load_cifar10(str(tmp_path))
        report("criterion 8 (loader format check)", True,
               "truncated file rejected with byte counts in the message")
