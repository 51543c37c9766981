import contextlib
import io
import json
import math
import os
import shutil
import struct
import tempfile
import unittest
from dataclasses import replace

import numpy as np
import pandas as pd

from vitae.ablation import ABLATION_COLUMNS, apply_axes, parse_matrix, run_ablation
from vitae.analysis import (
    CamGrid, attention_distance, count_macs, count_params, export_csv, export_pgm, grad_cam, grid_distances,
    mean_attention_distance, read_pgm)
from vitae.checkpoint import decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from vitae.cli import main
from vitae.config import (
    DataConfig, ModelConfig, SyntheticSpec, TrainConfig, model_config_from, preset, vitae_micro,
    vitae_micro_64, vitae_s, vitae_t)
from vitae.data import (
    Dataset, batches, gen_synthetic, load_data, load_idx, rasterize, training_subset, write_idx)
from vitae.errors import (
    ConfigurationError, DataError, DimensionError, DivergenceError, FormatError, UsageError)
from vitae.gradcheck import check_model, finite_diff_check, relative_error
from vitae.model import (
    ParamStore, Trace, ViTAE, attention_forward, build_model, ffn_forward, mhsa_forward, model_forward, nc_forward,
    orthogonal_features, pcm_forward, plan_model, prm_forward, rc_forward, sinusoid_pos_encoding)
from vitae.optim import OptimizerState, adamw_step, cosine_lr
from vitae.tensor import (
    ConvSpec, Graph, Tensor, activation, backward, batchnorm2d, concat, conv2d, img2seq, inject_fault, layernorm,
    matmul, mean_spatial, no_grad, seq2img, set_num_threads, slice_tokens, softmax_lastdim)
from vitae.train import Trainer, cross_entropy, evaluate


SLOW = os.environ.get("VITAE_SLOW_TESTS") == "1"


def reference_conv(x, w, b, stride, dilation, padding, groups):
    n, cin, h, wd = x.shape
    cout, cin_group, kh, kw = w.shape
    oh = (h + 2 * padding[0] - dilation[0] * (kh - 1) - 1) // stride[0] + 1
    ow = (wd + 2 * padding[1] - dilation[1] * (kw - 1) - 1) // stride[1] + 1
    per_group = cout // groups
    out = np.zeros((n, cout, oh, ow))
    for s in range(n):
        for co in range(cout):
            g = co // per_group
            for oy in range(oh):
                for ox in range(ow):
                    total = 0.0 if b is None else b[co]
                    for ci in range(cin_group):
                        for i in range(kh):
                            y = oy * stride[0] - padding[0] + i * dilation[0]
                            if not 0 <= y < h:
                                continue
                            for j in range(kw):
                                xx = ox * stride[1] - padding[1] + j * dilation[1]
                                if 0 <= xx < wd:
                                    total += x[s, g * cin_group + ci, y, xx] * w[co, ci, i, j]
                    out[s, co, oy, ox] = total
    return out


def reference_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


def quiet(argv):
    with contextlib.redirect_stdout(io.StringIO()):
        return main(argv)


def tiny_data(canvas=16, per_class=6, seed=0):
    return gen_synthetic(SyntheticSpec(canvas=canvas, samples_per_class=per_class, seed=seed))


class TestTensorCore(unittest.TestCase):
    def setUp(self):
        self.rng = np.random.default_rng(7)

    def test_matmul_matches_triple_loop(self):
        a = self.rng.standard_normal((4, 5))
        b = self.rng.standard_normal((5, 3))
        out = matmul(Tensor(a), Tensor(b))
        self.assertLess(np.abs(out.data - reference_matmul(a, b)).max(), 1e-12)

    def test_reused_tensor_accumulates(self):
        x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
        backward((x * x).sum())
        np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])

    def test_broadcast_gradient_reduces(self):
        x = Tensor(np.ones((3, 4)), requires_grad=True)
        b = Tensor(np.ones(4), requires_grad=True)
        backward((x + b).sum())
        np.testing.assert_array_equal(b.grad, np.full(4, 3.0))

    def test_backward_needs_scalar_root(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with self.assertRaises(UsageError):
            backward(x * 2.0)

    def test_backward_needs_graph(self):
        with self.assertRaises(UsageError):
            backward(Tensor(np.ones(())).sum())

    def test_mixed_dtypes_rejected(self):
        a = Tensor(np.ones(2), dtype="float32")
        b = Tensor(np.ones(2), dtype="float64")
        with self.assertRaises(UsageError):
            a + b

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with no_grad():
            y = x * 3.0
        self.assertIsNone(y.node)
        self.assertFalse(y.requires_grad)

    def test_graph_in_append_order(self):
        x = Tensor(np.ones(2), requires_grad=True)
        y = (x.exp() * 2.0).sum()
        self.assertEqual(Graph.trace(y).ops(), ["exp", "mul", "sum"])

    def test_retain_grad_on_intermediate(self):
        x = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        h = (x * 3.0).retain_grad()
        backward((h * h).sum())
        np.testing.assert_allclose(h.grad, 2.0 * h.data)

    def test_shape_errors(self):
        with self.assertRaises(DimensionError):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
        with self.assertRaises(DimensionError):
            slice_tokens(Tensor(np.ones((1, 3, 2))), 2, 5)

    def test_img2seq_round_trip(self):
        x = Tensor(self.rng.standard_normal((2, 3, 4, 5)))
        tokens = img2seq(x)
        self.assertEqual(tokens.shape, (2, 20, 3))
        np.testing.assert_array_equal(tokens.data[0, 6], x.data[0, :, 1, 1])
        np.testing.assert_array_equal(seq2img(tokens, 4, 5).data, x.data)
        np.testing.assert_allclose(mean_spatial(x).data, x.data.mean(axis=(2, 3)), rtol=0, atol=1e-15)
        with self.assertRaises(DimensionError):
            mean_spatial(tokens)

    def test_softmax_of_large_logits(self):
        out = softmax_lastdim(Tensor(np.array([[1000.0, 0.0], [-3.0, -3.0]]))).data
        self.assertTrue(np.isfinite(out).all())
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)
        np.testing.assert_allclose(out, [[1.0, 0.0], [0.5, 0.5]], atol=1e-12)

    def test_layernorm_of_constant_row(self):
        out = layernorm(Tensor(np.full((2, 6), 3.5)), Tensor(np.ones(6)), Tensor(np.zeros(6))).data
        np.testing.assert_array_equal(out, np.zeros((2, 6)))

    def test_op_gradients(self):
        rng = self.rng
        cases = {
            "layernorm": lambda p: layernorm(p["x"], p["g"], p["b"]),
            "batchnorm": lambda p: batchnorm2d(p["m"], p["c"], p["d"], None, None, True),
            "softmax": lambda p: softmax_lastdim(p["x"]),
            "gelu": lambda p: activation(p["x"], "gelu"),
            "silu": lambda p: activation(p["x"], "silu"),
            "concat": lambda p: concat([p["x"], p["x"] * p["x"]], axis=1),
            "matmul": lambda p: matmul(p["x"], p["x"].transpose(1, 0)),
            "mean_spatial": lambda p: mean_spatial(p["m"]),
        }
        for name, op in cases.items():
            with self.subTest(op=name):
                params = {
                    "x": Tensor(rng.standard_normal((3, 5)), requires_grad=True),
                    "g": Tensor(1.0 + 0.3 * rng.standard_normal(5), requires_grad=True),
                    "b": Tensor(rng.standard_normal(5), requires_grad=True),
                    "m": Tensor(rng.standard_normal((2, 3, 4, 4)), requires_grad=True),
                    "c": Tensor(1.0 + 0.3 * rng.standard_normal(3), requires_grad=True),
                    "d": Tensor(rng.standard_normal(3), requires_grad=True),
                }
                readout = np.random.default_rng(1)
                weights = {}

                def f(p):
                    out = op(p)
                    if "w" not in weights:
                        weights["w"] = readout.standard_normal(out.shape)
                    return (out * Tensor(weights["w"])).sum()
                report = finite_diff_check(f, params, eps=1e-5)
                self.assertLess(report.worst(), 1e-5, report.errors)

    def test_batchnorm_updates_running_stats(self):
        x = self.rng.standard_normal((4, 2, 3, 3))
        mean, var = np.zeros(2), np.ones(2)
        batchnorm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), mean, var, True)
        np.testing.assert_allclose(mean, 0.1 * x.mean(axis=(0, 2, 3)))
        np.testing.assert_allclose(var, 0.9 + 0.1 * x.var(axis=(0, 2, 3), ddof=1))

    def test_injected_fault_is_caught(self):
        params = {"x": Tensor(self.rng.standard_normal(4), requires_grad=True)}
        inject_fault("exp", 1.5)
        try:
            report = finite_diff_check(lambda p: p["x"].exp().sum(), params)
        finally:
            inject_fault("exp", None)
        self.assertGreater(report.worst(), 0.3)

    def test_gradcheck_rejects_bad_eps_and_float32(self):
        params = {"x": Tensor(np.ones(2), requires_grad=True)}
        with self.assertRaises(UsageError):
            finite_diff_check(lambda p: p["x"].sum(), params, eps=1e-2)
        params32 = {"x": Tensor(np.ones(2), requires_grad=True, dtype="float32")}
        with self.assertRaises(UsageError):
            finite_diff_check(lambda p: p["x"].sum(), params32)

    def test_relative_error_floor(self):
        self.assertEqual(float(relative_error(0.0, 0.0)), 0.0)
        self.assertAlmostEqual(float(relative_error(1.0, 2.0)), 0.5)


class TestConv2d(unittest.TestCase):
    def setUp(self):
        self.rng = np.random.default_rng(3)

    def random_case(self):
        rng = self.rng
        groups = int(rng.choice([1, 2]))
        cin = groups * int(rng.integers(1, 3))
        cout = groups * int(rng.integers(1, 3))
        kh, kw = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        stride = (int(rng.integers(1, 4)), int(rng.integers(1, 4)))
        dilation = (int(rng.integers(1, 5)), int(rng.integers(1, 5)))
        padding = (int(rng.integers(0, 4)), int(rng.integers(0, 4)))
        h = dilation[0] * (kh - 1) + 1 + int(rng.integers(0, 4))
        w = dilation[1] * (kw - 1) + 1 + int(rng.integers(0, 4))
        x = rng.standard_normal((2, cin, h, w))
        weight = rng.standard_normal((cout, cin // groups, kh, kw))
        bias = rng.standard_normal(cout) if rng.random() < 0.5 else None
        return x, weight, bias, ConvSpec((kh, kw), stride, dilation, groups, padding)

    def test_matches_nested_loop_oracle(self):
        for case in range(200):
            x, weight, bias, spec = self.random_case()
            out = conv2d(Tensor(x), Tensor(weight), None if bias is None else Tensor(bias), spec)
            expected = reference_conv(x, weight, bias, spec.stride, spec.dilation, spec.padding, spec.groups)
            self.assertEqual(out.shape, expected.shape, (case, spec))
            self.assertLess(np.abs(out.data - expected).max(), 1e-10, (case, spec))

    def test_gradients(self):
        rng = self.rng
        params = {
            "x": Tensor(rng.standard_normal((2, 4, 7, 6)), requires_grad=True),
            "w": Tensor(rng.standard_normal((6, 2, 3, 3)), requires_grad=True),
            "b": Tensor(rng.standard_normal(6), requires_grad=True),
        }
        spec = ConvSpec((3, 3), (2, 1), (2, 1), 2, (1, 2))
        readout = rng.standard_normal((2, 6) + spec.output_size(7, 6))
        report = finite_diff_check(lambda p: (conv2d(p["x"], p["w"], p["b"], spec) * Tensor(readout)).sum(), params)
        self.assertLess(report.worst(), 1e-5, report.errors)

    def test_bias_gradient_per_output_channel(self):
        rng = self.rng
        x = Tensor(rng.standard_normal((2, 4, 5, 5)))
        for groups in (1, 2):
            with self.subTest(groups=groups):
                weight = Tensor(rng.standard_normal((6, 4 // groups, 3, 3)))
                spec = ConvSpec((3, 3), (1, 1), (1, 1), groups, (1, 1))
                bias = Tensor(rng.standard_normal(6), requires_grad=True)
                backward(conv2d(x, weight, bias, spec).sum())
                np.testing.assert_array_equal(bias.grad, np.full(6, 2 * 5 * 5.0))
                readout = rng.standard_normal((2, 6, 5, 5))
                params = {"b": Tensor(rng.standard_normal(6), requires_grad=True)}
                report = finite_diff_check(lambda p: (conv2d(x, weight, p["b"], spec) * Tensor(readout)).sum(), params)
                self.assertLess(report.worst(), 1e-5, report.errors)

    def test_aligned_padding_keeps_ceil_size(self):
        for dilation in (1, 2, 3, 4):
            spec = ConvSpec.aligned(3, 2, dilation)
            self.assertEqual(spec.output_size(28, 28), (14, 14))
        self.assertEqual(ConvSpec.aligned(7, 4, 1).output_size(224, 224), (56, 56))

    def test_threads_do_not_change_results(self):
        x, weight, bias, spec = self.random_case()
        x = np.concatenate([x] * 3)
        single = conv2d(Tensor(x), Tensor(weight), None, spec).data
        set_num_threads(3)
        try:
            threaded = conv2d(Tensor(x), Tensor(weight), None, spec).data
        finally:
            set_num_threads(1)
        np.testing.assert_array_equal(single, threaded)

    def test_empty_output_rejected(self):
        with self.assertRaises(ConfigurationError):
            ConvSpec((5, 5)).output_size(3, 3)
        with self.assertRaises(DimensionError):
            conv2d(Tensor(np.ones((1, 3, 4, 4))), Tensor(np.ones((2, 2, 1, 1))), None, ConvSpec(groups=2))


class TestArchitecture(unittest.TestCase):
    def setUp(self):
        self.rng = np.random.default_rng(11)

    def test_vitae_t_shape_chain(self):
        plan = plan_model(vitae_t())
        self.assertEqual([cell.output_shape for cell in plan.cells[:3]],
                         [(64, 56, 56), (64, 28, 28), (256, 14, 14)])
        self.assertEqual(plan.grid, (14, 14))
        self.assertEqual(plan.num_tokens, 197)
        self.assertTrue(all(cell.input_shape == (197, 256) for cell in plan.cells[3:]))
        self.assertEqual(vitae_t().rcs[1].branch_widths(), (22, 21, 21))
        self.assertEqual([rc.embed_dim for rc in vitae_t().rcs], [64, 64, 256])

    def test_micro_forward_shape(self):
        model = ViTAE(vitae_micro())
        logits = model(self.rng.standard_normal((2, 1, 16, 16)))
        self.assertEqual(logits.shape, (2, 3))
        self.assertEqual(logits.dtype, np.float32)

    def test_input_not_divisible_by_stride(self):
        with self.assertRaisesRegex(ConfigurationError, "multiple of 16"):
            vitae_t().check_input(225, 224)
        with self.assertRaises(ConfigurationError):
            count_macs(vitae_t(), (225, 225))

    def test_build_is_deterministic(self):
        first, _ = build_model(vitae_micro())
        second, _ = build_model(vitae_micro())
        self.assertTrue(first.equals(second))
        other, _ = build_model(replace(vitae_micro(), seed=1))
        self.assertFalse(first.equals(other))

    def test_sinusoid_closed_form(self):
        table = sinusoid_pos_encoding(5, 6).data
        for pos in range(5):
            for i in range(3):
                angle = pos / 10000 ** (2 * i / 6)
                self.assertAlmostEqual(table[pos, 2 * i], math.sin(angle), places=12)
                self.assertAlmostEqual(table[pos, 2 * i + 1], math.cos(angle), places=12)
        with self.assertRaises(ConfigurationError):
            sinusoid_pos_encoding(4, 5)

    def test_prm_branches_are_plain_convs(self):
        rc = replace(vitae_micro().rcs[0], prm_activation="none", dilation_set=(1, 2, 3), branch_channels=(3, 3, 2))
        cfg = replace(vitae_micro(), rcs=(rc,))
        params, _ = build_model(cfg, "float64")
        f = Tensor(self.rng.standard_normal((2, 1, 16, 16)))
        out = prm_forward(f, rc, params, "rc1.prm").data
        offsets = np.cumsum((0,) + rc.branch_widths())
        for j, dilation in enumerate(rc.dilation_set):
            prefix = "rc1.prm.branch{}".format(j)
            branch = conv2d(f, params[prefix + ".weight"], params[prefix + ".bias"],
                            ConvSpec.aligned(rc.kernel, rc.stride, dilation))
            self.assertLess(np.abs(out[:, offsets[j]:offsets[j + 1]] - branch.data).max(), 1e-10)

    def test_single_dilation_prm_is_strided_conv(self):
        rc = replace(vitae_micro().rcs[0], prm_activation="none", dilation_set=(1,), branch_channels=8)
        params, _ = build_model(replace(vitae_micro(), rcs=(rc,)), "float64")
        f = Tensor(self.rng.standard_normal((1, 1, 16, 16)))
        spec = ConvSpec((7, 7), (4, 4), (1, 1), 1, (3, 3))
        plain = conv2d(f, params["rc1.prm.branch0.weight"], params["rc1.prm.branch0.bias"], spec)
        np.testing.assert_array_equal(prm_forward(f, rc, params, "rc1.prm").data, plain.data)

    def test_zero_pcm_equals_disabled_pcm(self):
        cfg = vitae_micro()
        rc = cfg.rcs[0]
        params, _ = build_model(cfg)
        for name in ("rc1.pcm.conv2.weight", "rc1.pcm.conv2.bias"):
            params[name].data[...] = 0.0
        f = Tensor(self.rng.standard_normal((2, 1, 16, 16)), dtype="float32")
        with_pcm = rc_forward(f, rc, params, "rc1").data
        without = rc_forward(f, replace(rc, pcm_enabled=False), params, "rc1").data
        np.testing.assert_array_equal(with_pcm, without)

    def test_rc_is_attention_plus_pcm_then_ffn(self):
        cfg = vitae_micro()
        params, _ = build_model(cfg, "float64")
        f = Tensor(self.rng.standard_normal((2, 1, 16, 16)))
        for enabled in (False, True):
            with self.subTest(pcm=enabled):
                rc = replace(cfg.rcs[0], pcm_enabled=enabled)
                multi_scale = prm_forward(f, rc, params, "rc1.prm")
                h, w = multi_scale.shape[2:]
                tokens = layernorm(img2seq(multi_scale), params["rc1.ln1.gamma"], params["rc1.ln1.beta"])
                fused = mhsa_forward(tokens, params, rc.heads, "rc1.mhsa")
                if enabled:
                    fused = fused + img2seq(pcm_forward(f, rc, params, "rc1.pcm"))
                out = fused + ffn_forward(layernorm(fused, params["rc1.ln2.gamma"], params["rc1.ln2.beta"]),
                                          params, "rc1.ffn")
                expected = seq2img(out, h, w).data
                np.testing.assert_allclose(rc_forward(f, rc, params, "rc1").data, expected, rtol=0, atol=1e-12)

    def test_rc_width_must_match_out_channels(self):
        cfg = vitae_micro()
        wider = replace(cfg, rcs=(replace(cfg.rcs[0], branch_channels=6),))
        with self.assertRaisesRegex(ConfigurationError, r"rcs\[0\]: multi-scale width 12 .* out_channels 8"):
            wider.validate()
        with self.assertRaisesRegex(ConfigurationError, "branch_channels"):
            replace(cfg, rcs=(replace(cfg.rcs[0], branch_channels=(4, 2, 2)),)).validate()

    def test_class_token_ignores_nc_pcm(self):
        cfg = vitae_micro()
        nc = cfg.ncs[0]
        params, plan = build_model(cfg, "float64")
        t = Tensor(self.rng.standard_normal((2, plan.num_tokens, nc.embed_dim)))
        before = nc_forward(t, nc, params, plan.grid, "nc1").data
        for name in ("nc1.pcm.conv0.weight", "nc1.pcm.conv1.weight", "nc1.pcm.conv2.weight", "nc1.pcm.conv2.bias"):
            params[name].data += self.rng.standard_normal(params[name].shape)
        after = nc_forward(t, nc, params, plan.grid, "nc1").data
        np.testing.assert_array_equal(before[:, 0], after[:, 0])
        self.assertGreater(np.abs(before[:, 1:] - after[:, 1:]).max(), 0.0)

    def test_nc_matches_composition(self):
        cfg = vitae_micro()
        nc = cfg.ncs[0]
        params, plan = build_model(cfg, "float64")
        h, w = plan.grid
        t = Tensor(self.rng.standard_normal((2, plan.num_tokens, nc.embed_dim)))
        normed = layernorm(t, params["nc1.ln1.gamma"], params["nc1.ln1.beta"])
        fused = (t + mhsa_forward(normed, params, nc.heads, "nc1.mhsa")).data.copy()
        spatial = seq2img(Tensor(t.data[:, 1:]), h, w)
        fused[:, 1:] += img2seq(pcm_forward(spatial, nc, params, "nc1.pcm")).data
        fused = Tensor(fused)
        expected = fused + ffn_forward(layernorm(fused, params["nc1.ln2.gamma"], params["nc1.ln2.beta"]),
                                       params, "nc1.ffn")
        out = nc_forward(t, nc, params, plan.grid, "nc1").data
        np.testing.assert_allclose(out, expected.data, rtol=0, atol=1e-12)

    def test_depthwise_nc_pcm_keeps_channels_apart(self):
        nc = replace(vitae_micro().ncs[0], pcm_groups=8)
        params, plan = build_model(replace(vitae_micro(), ncs=(nc,)), "float64")
        spatial = Tensor(self.rng.standard_normal((2, 8) + plan.grid))
        before = pcm_forward(spatial, nc, params, "nc1.pcm").data
        for index in range(3):
            weight = params["nc1.pcm.conv{}.weight".format(index)]
            weight.data[3] += self.rng.standard_normal(weight.shape[1:])
        after = pcm_forward(spatial, nc, params, "nc1.pcm").data
        others = [c for c in range(8) if c != 3]
        np.testing.assert_array_equal(before[:, others], after[:, others])
        self.assertGreater(np.abs(before[:, 3] - after[:, 3]).max(), 0.0)

    def test_attention_permutation_equivariance(self):
        params, plan = build_model(vitae_micro())
        tokens = self.rng.standard_normal((2, plan.num_tokens, 8)).astype(np.float32)
        order = self.rng.permutation(plan.num_tokens)
        out = mhsa_forward(Tensor(tokens), params, 2, "nc1.mhsa").data
        permuted = mhsa_forward(Tensor(tokens[:, order]), params, 2, "nc1.mhsa").data
        self.assertLess(np.abs(out[:, order] - permuted).max(), 1e-5)

    def test_performer_attention(self):
        rng = self.rng
        store = ParamStore("float64")
        store.add("tokens", rng.standard_normal((2, 6, 8)))
        for key in ("wq", "wk", "wv", "wo"):
            store.add("att." + key, 0.5 * rng.standard_normal((8, 8)))
        store.add("att.bo", rng.standard_normal(8))
        store.add_buffer("att.features", orthogonal_features(rng, 3, 4))
        readout = rng.standard_normal((2, 6, 8))

        def f(p):
            return (attention_forward(p["tokens"], p, "att", 2, "performer") * Tensor(readout)).sum()
        report = finite_diff_check(f, store)
        self.assertLess(report.worst(), 1e-5, report.errors)
        trace = Trace()
        attention_forward(store["tokens"], store, "att", 2, "performer", trace, (2, 3), 0)
        implied = trace.attention["att"]
        self.assertEqual(implied.shape, (2, 2, 6, 6))
        np.testing.assert_allclose(implied.sum(axis=-1), 1.0, atol=1e-12)
        self.assertTrue((implied > 0).all())

    def test_full_model_gradient_check(self):
        # round-off on the smallest gradients grows like 1e-16 / eps and truncation like eps ** 2;
        # 1e-4 keeps both well inside the 1e-5 threshold
        report = check_model(vitae_micro(), eps=1e-4, seed=0)
        self.assertEqual(len(report.errors), len(build_model(vitae_micro(), initialize=False)[0]))
        self.assertEqual(report.offenders(1e-5), [], report.by_module())

    def test_config_errors_name_the_field(self):
        with self.assertRaisesRegex(ConfigurationError, r"rcs\[0\]\.colour: unknown field"):
            ModelConfig.from_dict({"input_size": [16, 16, 1], "rcs": [{"colour": 1}], "ncs": [], "num_classes": 3})
        broken = replace(vitae_micro(), ncs=(replace(vitae_micro().ncs[0], heads=3),), num_classes=0)
        with self.assertRaises(ConfigurationError) as caught:
            broken.validate()
        self.assertIn("num_classes", str(caught.exception))
        self.assertIn("heads 3", str(caught.exception))

    def test_config_round_trip_and_presets(self):
        for cfg in (vitae_t(), vitae_s(), vitae_micro_64()):
            again = ModelConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
            self.assertEqual(again, cfg)
        merged = model_config_from({"preset": "vitae-micro", "num_classes": 5, "ncs": [{"fusion": "post"}]})
        self.assertEqual(merged.num_classes, 5)
        self.assertEqual(merged.ncs[0].fusion, "post")
        self.assertEqual(merged.ncs[0].embed_dim, 8)
        with self.assertRaises(ConfigurationError):
            preset("vitae-xl")


class TestTraining(unittest.TestCase):
    def setUp(self):
        self.directory = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.directory)

    def test_cross_entropy(self):
        logits = np.array([[2.0, 0.5, -1.0], [0.0, 0.0, 0.0]])
        labels = np.array([0, 2])
        loss = cross_entropy(Tensor(logits), labels).item()
        expected = np.mean([-math.log(math.exp(2.0) / sum(math.exp(v) for v in logits[0])), math.log(3.0)])
        self.assertAlmostEqual(loss, expected, places=12)
        report = finite_diff_check(lambda p: cross_entropy(p["z"], labels, 0.1),
                                   {"z": Tensor(logits.copy(), requires_grad=True)})
        self.assertLess(report.worst(), 1e-6)
        with self.assertRaises(DataError):
            cross_entropy(Tensor(logits), np.array([0, 3]))

    def test_cross_entropy_ignores_logit_shift(self):
        rng = np.random.default_rng(2)
        logits = rng.standard_normal((5, 4))
        labels = np.array([0, 3, 1, 1, 2])
        base = cross_entropy(Tensor(logits), labels, 0.1).item()
        for shift in (-50.0, 37.5):
            self.assertLess(abs(cross_entropy(Tensor(logits + shift), labels, 0.1).item() - base), 1e-12)

    def test_adamw_step(self):
        store = ParamStore("float64")
        store.add("w", np.array([1.0, -2.0]))
        store.add("b", np.array([0.5]), decay=False)
        store["w"].grad = np.array([0.1, 0.2])
        store["b"].grad = np.array([-0.3])
        state = OptimizerState(weight_decay=0.1)
        adamw_step(store, state, lr=0.01)
        # first step: the bias-corrected update is lr * sign(g)
        np.testing.assert_allclose(store["w"].data, [1.0 * (1 - 0.001) - 0.01, -2.0 * (1 - 0.001) - 0.01], rtol=1e-6)
        np.testing.assert_allclose(store["b"].data, [0.51], rtol=1e-6)
        store["b"].grad = None
        with self.assertRaisesRegex(UsageError, "parameter b"):
            adamw_step(store, state, lr=0.01)

    def test_adamw_without_decay_is_adam(self):
        store = ParamStore("float64")
        store.add("w", np.array([0.7]))
        state = OptimizerState(weight_decay=0.0)
        beta1, beta2, lr = 0.9, 0.999, 0.05
        theta, m, v = 0.7, 0.0, 0.0
        for t in range(1, 31):
            store["w"].grad = 2.0 * store["w"].data
            adamw_step(store, state, lr=lr)
            g = 2.0 * theta
            m = beta1 * m + (1.0 - beta1) * g
            v = beta2 * v + (1.0 - beta2) * g * g
            theta -= lr * (m / (1.0 - beta1 ** t)) / (math.sqrt(v / (1.0 - beta2 ** t)) + 1e-8)
            self.assertLess(abs(store["w"].data[0] - theta), 1e-12)

    def test_cosine_schedule(self):
        self.assertEqual(cosine_lr(0, 100, 1.0, 0.0, 10), 0.0)
        self.assertAlmostEqual(cosine_lr(5, 100, 1.0, 0.0, 10), 0.5)
        self.assertAlmostEqual(cosine_lr(10, 100, 1.0, 0.0, 10), 1.0)
        self.assertAlmostEqual(cosine_lr(55, 100, 1.0, 0.1, 10), 0.55)
        self.assertAlmostEqual(cosine_lr(100, 100, 1.0, 0.1, 10), 0.1)
        with self.assertRaises(UsageError):
            cosine_lr(101, 100, 1.0, 0.0, 10)

    def test_cosine_never_rises_after_warmup(self):
        rates = [cosine_lr(step, 200, 1.0, 0.01, 20) for step in range(201)]
        self.assertTrue(all(b >= a for a, b in zip(rates[:20], rates[1:21])))
        self.assertTrue(all(b <= a for a, b in zip(rates[20:], rates[21:])))
        self.assertAlmostEqual(rates[-1], 0.01)

    def test_first_step_of_warmup_moves_weights(self):
        data = tiny_data()
        trainer = Trainer(vitae_micro(), TrainConfig(epochs=2, batch_size=8, warmup_epochs=1), data)
        self.assertEqual(trainer.lr_at(0), 0.0)
        before = trainer.model.params["head.weight"].data.copy()
        _, lr = trainer.train_step(data.normalize(data.images[:8]), data.labels[:8])
        self.assertAlmostEqual(lr, trainer.peak_lr / trainer.warmup_steps)
        self.assertFalse(np.array_equal(before, trainer.model.params["head.weight"].data))

    def test_short_run_writes_metrics_and_checkpoints(self):
        train_cfg = TrainConfig(epochs=2, batch_size=8, base_lr=0.016)
        trainer = Trainer(vitae_micro(), train_cfg, tiny_data(), tiny_data(per_class=2, seed=1), self.directory)
        metrics = trainer.fit()
        self.assertEqual([m.epoch for m in metrics], [1, 2])
        self.assertTrue(all(math.isfinite(m.train_loss) for m in metrics))
        frame = pd.read_csv(os.path.join(self.directory, "metrics.csv"))
        self.assertEqual(list(frame.columns), ["epoch", "step", "lr", "train_loss", "val_loss", "val_top1"])
        self.assertEqual(len(frame), 2)
        for epoch in (1, 2):
            self.assertTrue(os.path.exists(os.path.join(self.directory, "ckpt_epoch{}.vtae".format(epoch))))

    def test_resume_continues_identically(self):
        train_cfg = TrainConfig(epochs=2, batch_size=8, base_lr=0.016, hflip=True)
        data = tiny_data()
        straight = Trainer(vitae_micro(), train_cfg, data, None, os.path.join(self.directory, "a"))
        straight.fit()
        first = Trainer(vitae_micro(), train_cfg, data, None, os.path.join(self.directory, "b"))
        os.makedirs(first.output_dir)
        first.run_epoch()
        resumed = Trainer.resume(os.path.join(self.directory, "b", "ckpt_epoch1.vtae"), data, None,
                                 os.path.join(self.directory, "b"), train_cfg)
        resumed.fit()
        self.assertEqual(resumed.epoch, 2)
        self.assertTrue(straight.model.params.equals(resumed.model.params))

    def test_identical_runs_write_identical_metrics(self):
        train_cfg = TrainConfig(epochs=2, batch_size=8, base_lr=0.016, hflip=True)
        written = []
        for name in ("a", "b"):
            out = os.path.join(self.directory, name)
            Trainer(vitae_micro(), train_cfg, tiny_data(), tiny_data(per_class=2, seed=1), out).fit()
            with open(os.path.join(out, "metrics.csv")) as handle:
                written.append(handle.read())
        self.assertEqual(written[0], written[1])

    def test_micro_loss_goes_down(self):
        data = tiny_data(per_class=171).subset(np.arange(512))
        trainer = Trainer(vitae_micro(), TrainConfig(epochs=5, batch_size=32, base_lr=0.016), data)
        _, initial = evaluate(trainer.model, data)
        trainer.fit()
        _, final = evaluate(trainer.model, data)
        self.assertLess(final, initial)

    def test_divergence_names_last_checkpoint(self):
        trainer = Trainer(vitae_micro(), TrainConfig(epochs=1, batch_size=8), tiny_data())
        trainer.last_checkpoint = "runs/x/ckpt_epoch3.vtae"
        images = np.full((2, 1, 16, 16), np.nan)
        with self.assertRaisesRegex(DivergenceError, "ckpt_epoch3"):
            trainer.train_step(images, np.array([0, 1]))

    def test_evaluate_counts_correct(self):
        model = ViTAE(vitae_micro())
        data = tiny_data()
        top1, loss = evaluate(model, data.with_normalization(data.mean, data.std))
        predicted = model.predict(data.normalize(data.images)).argmax(axis=1)
        self.assertAlmostEqual(top1, float((predicted == data.labels).mean()))
        self.assertTrue(math.isfinite(loss))

    @unittest.skipUnless(SLOW, "set VITAE_SLOW_TESTS=1 for desk-scale training")
    def test_synthetic_run_learns(self):
        data = DataConfig(synthetic=SyntheticSpec(canvas=64, samples_per_class=500, seed=0), val_samples_per_class=100)
        train_set, val_set = load_data(data)
        train_cfg = TrainConfig(epochs=20, batch_size=32, base_lr=0.016)
        for use_pos, floor in ((True, 0.90), (False, 0.85)):
            cfg = replace(vitae_micro_64(), use_pos_embedding=use_pos)
            metrics = Trainer(cfg, train_cfg, train_set, val_set).fit()
            self.assertGreaterEqual(max(m.val_top1 for m in metrics), floor)


class TestData(unittest.TestCase):
    def setUp(self):
        self.directory = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.directory)

    def path(self, name):
        return os.path.join(self.directory, name)

    def test_idx_round_trip(self):
        data = tiny_data()
        write_idx(data, self.path("img"), self.path("lbl"))
        loaded = load_idx(self.path("img"), self.path("lbl"))
        np.testing.assert_array_equal(loaded.labels, data.labels)
        self.assertLessEqual(np.abs(loaded.images - data.images).max(), 0.5 / 255 + 1e-6)

    def test_idx_errors(self):
        with open(self.path("img"), "wb") as handle:
            handle.write(struct.pack(">IIII", 0x0803, 2, 2, 2) + bytes(8))
        with open(self.path("bad"), "wb") as handle:
            handle.write(struct.pack(">II", 0x0802, 2) + bytes(2))
        with self.assertRaisesRegex(FormatError, "magic"):
            load_idx(self.path("img"), self.path("bad"))
        with open(self.path("lbl"), "wb") as handle:
            handle.write(struct.pack(">II", 0x0801, 2) + bytes(3))
        with self.assertRaisesRegex(FormatError, "trailing"):
            load_idx(self.path("img"), self.path("lbl"))
        with open(self.path("lbl"), "wb") as handle:
            handle.write(struct.pack(">II", 0x0801, 3) + bytes(3))
        with self.assertRaises(FormatError):
            load_idx(self.path("img"), self.path("lbl"))
        with open(self.path("short"), "wb") as handle:
            handle.write(struct.pack(">IIII", 0x0803, 2, 2, 2) + bytes(5))
        with self.assertRaisesRegex(FormatError, "truncated"):
            load_idx(self.path("short"), self.path("lbl"))

    def test_synthetic_is_deterministic_and_balanced(self):
        first, second = tiny_data(), tiny_data()
        np.testing.assert_array_equal(first.images, second.images)
        np.testing.assert_array_equal(np.bincount(first.labels), [6, 6, 6])
        self.assertEqual(first.images.dtype, np.float32)
        self.assertTrue(((first.images >= 0) & (first.images <= 1)).all())
        self.assertFalse(np.array_equal(first.images, tiny_data(seed=1).images))

    def test_synthetic_rejects_tiny_shapes(self):
        with self.assertRaises(ConfigurationError):
            gen_synthetic(SyntheticSpec(canvas=4, samples_per_class=1))

    def test_rasterized_disk_area(self):
        coverage = rasterize("disk", 20.0, 32.0, 32.0, 64)
        self.assertAlmostEqual(coverage.sum(), math.pi * 100.0, delta=3.0)

    def test_batches_cover_subset_once(self):
        data = tiny_data()
        epoch0 = batches(data, 4, seed=0, epoch=0, fraction=0.5)
        subset = training_subset(len(data), 0, 0.5)
        seen = np.concatenate([b.indices for b in epoch0])
        self.assertEqual(sorted(seen), sorted(subset))
        self.assertEqual([len(b) for b in epoch0], [4, 4, 1])
        again = batches(data, 4, seed=0, epoch=0, fraction=0.5)
        np.testing.assert_array_equal(seen, np.concatenate([b.indices for b in again]))
        epoch1 = batches(data, 4, seed=0, epoch=1, fraction=0.5)
        self.assertEqual(sorted(np.concatenate([b.indices for b in epoch1])), sorted(subset))
        with self.assertRaises(DataError):
            training_subset(10, 0, 0.05)
        self.assertEqual(len(training_subset(10, 0, 0.2)), 2)
        self.assertEqual(len(training_subset(10, 0, 0.6)), 6)

    def test_normalization_travels_to_validation(self):
        train_set, val_set = load_data(DataConfig(synthetic=SyntheticSpec(canvas=16, samples_per_class=4),
                                                  val_samples_per_class=2))
        np.testing.assert_array_equal(val_set.mean, train_set.mean)
        np.testing.assert_array_equal(val_set.std, train_set.std)
        self.assertEqual(len(val_set), 6)

    def test_constant_images_leave_std_one(self):
        data = Dataset(np.full((2, 1, 4, 4), 0.5, dtype=np.float32), np.array([0, 1]), ("a", "b"))
        np.testing.assert_array_equal(data.std, [1.0])
        with self.assertRaises(DataError):
            Dataset(np.zeros((2, 1, 4, 4)), np.array([0, 2]), ("a", "b"))


class TestAnalysis(unittest.TestCase):
    def setUp(self):
        self.rng = np.random.default_rng(5)
        self.directory = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.directory)

    def test_headline_param_counts(self):
        tiny, _ = build_model(vitae_t(), initialize=False)
        small, _ = build_model(vitae_s(), initialize=False)
        self.assertLess(abs(count_params(tiny).total_params - 4.8e6), 0.2 * 4.8e6)
        self.assertLess(abs(count_params(small).total_params - 23.6e6), 0.2 * 23.6e6)
        self.assertEqual(count_params(tiny).total_params, tiny.num_elements())

    def test_headline_macs(self):
        self.assertLess(abs(count_macs(vitae_t(), (224, 224)).total_macs - 1.5e9), 0.25 * 1.5e9)
        self.assertLess(abs(count_macs(vitae_s(), (224, 224)).total_macs - 5.6e9), 0.25 * 5.6e9)

    def test_conv_macs_by_hand(self):
        report = count_macs(vitae_micro())
        prm = [row for row in report.rows if row.name == "rc1.prm"][0]
        # two branches: 4x4 outputs, 4 channels, 1 input channel, 7x7 kernel
        self.assertEqual(prm.macs, 2 * 4 * 4 * 4 * 49)

    def test_uniform_attention_distance(self):
        h = w = 4
        positions = [(r, c) for r in range(h) for c in range(w)]
        expected = np.mean([math.hypot(a[0] - b[0], a[1] - b[1]) for a in positions for b in positions])
        uniform = np.full((h * w, h * w), 1.0 / (h * w))
        self.assertLess(abs(float(mean_attention_distance(uniform, (h, w))) - expected), 1e-9)
        self.assertEqual(float(mean_attention_distance(np.eye(h * w), (h, w))), 0.0)
        with_cls = np.zeros((h * w + 1, h * w + 1))
        with_cls[1:, 1:] = uniform
        self.assertLess(abs(float(mean_attention_distance(with_cls, (h, w), cls_tokens=1)) - expected), 1e-9)
        self.assertAlmostEqual(grid_distances(2, 2)[0, 3], math.sqrt(2.0))

    def test_attention_distance_report(self):
        model = ViTAE(vitae_micro())
        report = attention_distance(model, self.rng.standard_normal((2, 1, 16, 16)))
        self.assertEqual([row.layer for row in report.rows], ["rc1", "nc1"])
        self.assertEqual(report.rows[0].grid, (4, 4))
        self.assertEqual(len(report.rows[1].head_distances), 2)
        frame = report.to_frame()
        self.assertEqual(list(frame.columns), ["layer", "grid", "mean_distance", "head_distances"])
        path = export_csv(report, os.path.join(self.directory, "attn_dist.csv"))
        self.assertEqual(len(pd.read_csv(path)), 2)

    def test_grad_cam_matches_finite_differences(self):
        cfg = vitae_micro()
        model = ViTAE(cfg, dtype="float64")
        for _, tensor in model.params.items():
            tensor.data += self.rng.normal(0.0, 0.3, tensor.shape)
        image = self.rng.standard_normal((1, 16, 16))
        target = 1
        before = {name: tensor.data.copy() for name, tensor in model.params.items()}
        cam = grad_cam(model, image, target)
        for name, tensor in model.params.items():
            np.testing.assert_array_equal(tensor.data, before[name])
            self.assertIsNone(tensor.grad)
        x = Tensor(image[None])
        trace = Trace()
        with no_grad():
            model_forward(x, cfg, model.params, trace=trace)
        activations = trace.outputs["nc1.mhsa"].data[0, 1:].reshape(4, 4, -1)
        eps = 1e-5
        weights = np.zeros(activations.shape[-1])
        for channel in range(len(weights)):
            shift = np.zeros((1, 17, activations.shape[-1]))
            shift[0, 1:, channel] = eps
            with no_grad():
                plus = model_forward(x, cfg, model.params, trace=Trace({"nc1.mhsa": shift})).data[0, target]
                minus = model_forward(x, cfg, model.params, trace=Trace({"nc1.mhsa": -shift})).data[0, target]
            weights[channel] = (plus - minus) / (2 * eps) / 16
        expected = np.maximum((activations * weights).sum(axis=-1), 0.0)
        if expected.max() > 0:
            expected = expected / expected.max()
        self.assertEqual(cam.values.shape, (4, 4))
        np.testing.assert_allclose(cam.values, expected, atol=1e-6)
        with self.assertRaises(ConfigurationError):
            grad_cam(model, image, 3)

    def test_pgm_round_trip(self):
        values = self.rng.random((4, 5))
        path = export_pgm(CamGrid(values, 3, 1), os.path.join(self.directory, "cam_3.pgm"))
        with open(path) as handle:
            self.assertEqual(handle.readline().strip(), "P2")
        back = read_pgm(path)
        np.testing.assert_array_equal(np.rint(back * 255), np.floor(values * 255 + 0.5))


class TestCheckpoint(unittest.TestCase):
    def setUp(self):
        self.directory = tempfile.mkdtemp()
        self.model = ViTAE(vitae_micro())
        self.images = np.random.default_rng(2).standard_normal((2, 1, 16, 16))

    def tearDown(self):
        shutil.rmtree(self.directory)

    def checkpoint(self):
        trainer = Trainer(vitae_micro(), TrainConfig(epochs=1, batch_size=8), tiny_data(), model=self.model)
        trainer.run_epoch()
        return trainer.checkpoint()

    def test_round_trip_is_bit_exact(self):
        ckpt = self.checkpoint()
        path = save_checkpoint(os.path.join(self.directory, "m.vtae"), ckpt)
        loaded = load_checkpoint(path)
        self.assertTrue(loaded.params.equals(ckpt.params))
        self.assertEqual(loaded.model_config, ckpt.model_config)
        self.assertEqual(loaded.epoch, 1)
        self.assertEqual(loaded.optimizer.step, ckpt.optimizer.step)
        for name, moment in ckpt.optimizer.first.items():
            np.testing.assert_array_equal(loaded.optimizer.first[name], moment)
        np.testing.assert_array_equal(ViTAE(loaded.model_config, loaded.params).predict(self.images),
                                      self.model.predict(self.images))
        self.assertEqual(encode_checkpoint(loaded), encode_checkpoint(ckpt))

    def test_corruption_detected(self):
        raw = bytearray(encode_checkpoint(self.checkpoint()))
        raw[-10] ^= 0x01
        with self.assertRaisesRegex(FormatError, "checksum"):
            decode_checkpoint(bytes(raw))
        with self.assertRaisesRegex(FormatError, "magic"):
            decode_checkpoint(b"NOPE" + bytes(raw[4:]))
        with self.assertRaisesRegex(FormatError, "truncated"):
            decode_checkpoint(bytes(raw[:-3]))

    def test_config_disagreement(self):
        raw = encode_checkpoint(self.checkpoint())
        wider = replace(vitae_micro(), rcs=(replace(vitae_micro().rcs[0], branch_channels=(6, 2)),))
        with self.assertRaisesRegex(FormatError, "shape disagreement for rc1.prm.branch0.weight"):
            decode_checkpoint(raw, "m.vtae", wider)


class TestAblation(unittest.TestCase):
    def setUp(self):
        self.directory = tempfile.mkdtemp()
        self.base = {
            "model": "vitae-micro",
            "train": {"epochs": 1, "batch_size": 8},
            "data": {"synthetic": {"canvas": 16, "samples_per_class": 4}, "val_samples_per_class": 2},
        }

    def tearDown(self):
        shutil.rmtree(self.directory)

    def test_axes_apply(self):
        cfg = apply_axes(vitae_micro_64(), {"dilations": "down", "rc_fusion": "post", "pcm_bn": False})
        self.assertEqual([rc.dilation_set for rc in cfg.rcs], [(1, 2, 3, 4), (1, 2, 3), (1, 2)])
        self.assertEqual([rc.branch_widths() for rc in cfg.rcs], [(2, 2, 2, 2), (3, 3, 2), (8, 8)])
        self.assertEqual([rc.embed_dim for rc in cfg.rcs], [rc.out_channels for rc in vitae_micro_64().rcs])
        self.assertTrue(all(rc.fusion == "post" for rc in cfg.rcs))
        self.assertTrue(all(not cell.pcm_bn for cell in cfg.rcs + cfg.ncs))
        self.assertEqual(apply_axes(vitae_micro_64(), {"dilations": [1, 2, 3]}).rcs[2].dilation_set, (1, 2, 3))
        with self.assertRaises(ConfigurationError):
            apply_axes(vitae_micro_64(), {"colour": "red"})

    def test_matrix_rejects_duplicates(self):
        matrix = {"base": self.base, "variants": [{"id": "a", "axes": {}}, {"id": "a", "axes": {}}]}
        with self.assertRaisesRegex(ConfigurationError, "duplicate"):
            parse_matrix(matrix)

    def test_matrix_runs_every_variant(self):
        matrix = {"base": self.base, "variants": [
            {"id": "baseline", "axes": {}},
            {"id": "parallel-prm", "axes": {"parallel_branch": "prm", "prm_activation": "silu"}},
            {"id": "no-pe", "axes": {"use_pos_embedding": False, "nc_pcm": False}},
        ]}
        base, variants = parse_matrix(matrix)
        frame = run_ablation(base, variants, self.directory)
        self.assertEqual(list(frame.columns), ABLATION_COLUMNS)
        self.assertEqual(list(frame["variant"]), ["baseline", "parallel-prm", "no-pe"])
        written = pd.read_csv(os.path.join(self.directory, "ablation.csv"))
        self.assertEqual(len(written), 3)
        self.assertNotEqual(written["params"][0], written["params"][2])

    @unittest.skipUnless(SLOW, "set VITAE_SLOW_TESTS=1 for the full ablation matrix")
    def test_shipped_matrix(self):
        here = os.path.dirname(os.path.abspath(__file__))
        code = quiet(["ablate", "--matrix", os.path.join(here, "configs", "cell-ablation.json"),
                      "--output-dir", self.directory])
        self.assertEqual(code, 0)
        frame = pd.read_csv(os.path.join(self.directory, "ablation.csv"))
        self.assertEqual(len(frame), 14)
        self.assertTrue(frame["final_train_loss"].notna().all())


class TestCli(unittest.TestCase):
    def setUp(self):
        self.directory = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.directory)

    def path(self, name):
        return os.path.join(self.directory, name)

    def write_config(self):
        config = {
            "model": "vitae-micro",
            "train": {"epochs": 1, "batch_size": 8, "base_lr": 0.016},
            "data": {"synthetic": {"canvas": 16, "samples_per_class": 4}, "val_samples_per_class": 2},
            "output_dir": self.path("run"),
        }
        with open(self.path("run.json"), "w") as handle:
            json.dump(config, handle)
        return self.path("run.json")

    def test_cost_commands(self):
        self.assertEqual(quiet(["params", "--preset", "vitae-micro", "--csv", self.path("p.csv")]), 0)
        self.assertTrue(os.path.exists(self.path("p.csv")))
        self.assertEqual(quiet(["macs", "--preset", "vitae-t", "--input", "224"]), 0)
        self.assertEqual(quiet(["macs", "--preset", "vitae-t", "--input", "225"]), 2)
        self.assertEqual(quiet(["build", "--preset", "vitae-s"]), 0)

    def test_usage_errors(self):
        with contextlib.redirect_stderr(io.StringIO()):
            self.assertEqual(quiet(["no-such-command"]), 2)
            self.assertEqual(quiet(["params", "--preset", "vitae-xl"]), 2)
        self.assertEqual(quiet(["gradcheck", "--eps", "0.1"]), 2)
        self.assertEqual(quiet(["macs", "--preset", "vitae-t", "--input", "100"]), 2)

    def test_gradcheck_fault_exits_one(self):
        self.assertEqual(quiet(["gradcheck", "--entries", "2", "--inject-fault", "conv2d"]), 1)
        self.assertEqual(quiet(["gradcheck", "--entries", "2"]), 0)

    def test_train_then_analyse(self):
        config = self.write_config()
        self.assertEqual(quiet(["train", "--config", config, "--seed", "3"]), 0)
        checkpoint = self.path(os.path.join("run", "ckpt_epoch1.vtae"))
        self.assertTrue(os.path.exists(checkpoint))
        self.assertEqual(quiet(["train", "--config", config, "--seed", "3", "--epochs", "2", "--resume", checkpoint]), 0)
        self.assertEqual(len(pd.read_csv(self.path(os.path.join("run", "metrics.csv")))), 2)
        self.assertEqual(quiet(["evaluate", "--checkpoint", checkpoint, "--samples-per-class", "2"]), 0)
        self.assertEqual(quiet(["attn-dist", "--checkpoint", checkpoint, "--count", "2",
                                "--output-dir", self.path("out"), "--dump-matrices"]), 0)
        self.assertTrue(os.path.exists(self.path(os.path.join("out", "attn_dist.csv"))))
        self.assertTrue(os.path.exists(self.path(os.path.join("out", "attn_nc1.csv"))))
        self.assertEqual(quiet(["cam", "--checkpoint", checkpoint, "--index", "1", "--count", "2",
                                "--output-dir", self.path("out")]), 0)
        self.assertEqual(read_pgm(self.path(os.path.join("out", "cam_2.pgm"))).shape, (4, 4))
        self.assertEqual(quiet(["cam", "--checkpoint", checkpoint, "--class", "7"]), 2)

    def test_bad_config_and_divergence_codes(self):
        with open(self.path("bad.json"), "w") as handle:
            json.dump({"model": "vitae-micro", "train": {"data_fraction": 1.5}}, handle)
        self.assertEqual(quiet(["train", "--config", self.path("bad.json")]), 2)
        config = self.write_config()
        self.assertEqual(quiet(["train", "--config", config, "--data-fraction", "0"]), 2)
        self.assertEqual(quiet(["train", "--config", config, "--epochs", "0"]), 2)
        self.assertFalse(os.path.exists(self.path("run")))

    def test_synth_writes_idx(self):
        self.assertEqual(quiet(["synth", "--canvas", "16", "--samples-per-class", "2",
                                "--output-dir", self.path("idx")]), 0)
        data = load_idx(self.path(os.path.join("idx", "images-idx3-ubyte")),
                        self.path(os.path.join("idx", "labels-idx1-ubyte")))
        self.assertEqual(data.images.shape, (6, 1, 16, 16))


if __name__ == '__main__':
    unittest.main()
