from __future__ import annotations

import numpy as np
import pytest

from fuselab.config import SLOTS, Slot, slot_index
from fuselab.fusion import (AdaptiveFusion, BuildError, build_query_tokens, estimate_cameras, ftm_forward,
                            gim_fuse, graph_conv, normalized_adjacency, upsample_mesh)
from fuselab.geometry import TemplateError, build_template, project_points
from fuselab.sampling import CombinationError, combination_from_id, enumerate_combinations
from fuselab.tensorops import ParamStore, as_tensor, backward, multi_head_attention
from fuselab.trainer import compute_loss

PATH4 = np.array([[0, 1, 0, 0], [1, 0, 1, 0], [0, 1, 0, 1], [0, 0, 1, 0]], dtype=float)


def random_globals(rng, n, d=64):
    return [(rng.normal(size=(1, d)), s.kind, s.view) for s in SLOTS[:n]]


def gim_reference(globals_, params, profile):
    """Slot embedding, three attention layers, then a sum, built from the primitives."""
    table = params["gim.slot_embed"].data
    x = np.stack([g + table[slot_index(k, v)] for g, k, v in globals_], axis=1)
    x = as_tensor(x)
    for layer in range(profile.gim_layers):
        x = multi_head_attention(x, x, params, profile.heads, path=f"gim.layer{layer}")
    return x.data.sum(axis=1)


@pytest.fixture
def model64(profile, template):
    return AdaptiveFusion(profile, template, ParamStore(0, np.float64))


class TestGim:
    def test_single_input(self, rng, params64, profile):
        g = random_globals(rng, 1)
        out = gim_fuse(g, params64, profile).data
        np.testing.assert_allclose(out, gim_reference(g, params64, profile), atol=1e-12)

    def test_five_inputs_reference(self, rng, params64, profile):
        g = random_globals(rng, 5)
        params64.get("gim.slot_embed", (5, 64), "zeros").data[:] = rng.normal(size=(5, 64))
        out = gim_fuse(g, params64, profile).data
        np.testing.assert_allclose(out, gim_reference(g, params64, profile), atol=1e-10)

    def test_permutation(self, rng, params64, profile):
        g = random_globals(rng, 5)
        a = gim_fuse(g, params64, profile).data
        b = gim_fuse([g[i] for i in (3, 0, 4, 2, 1)], params64, profile).data
        np.testing.assert_allclose(a, b, atol=1e-9, rtol=0)

    def test_empty(self, params64, profile):
        with pytest.raises(CombinationError):
            gim_fuse([], params64, profile)


class TestQueries:
    def test_zero_global(self, template):
        q = build_query_tokens(template, np.zeros(64)).data[0]
        assert q.shape == (56, 67)
        np.testing.assert_array_equal(q[:, 3:], 0.0)
        np.testing.assert_allclose(q[:, :3], template.query_positions())

    def test_rows_share_global(self, template, rng):
        g = rng.normal(size=(2, 64))
        q = build_query_tokens(template, g).data
        np.testing.assert_array_equal(q[:, :, 3:], np.broadcast_to(g[:, None], (2, 56, 64)))

    def test_paper_row_count(self):
        assert build_template("paper").n_queries == 677


class TestGraphConv:
    def test_isolated_nodes_are_per_row_linear(self, rng, params64):
        x = rng.normal(size=(4, 5))
        out = graph_conv(as_tensor(x), normalized_adjacency(np.zeros((4, 4))), params64, "g", 3).data
        np.testing.assert_allclose(out, x @ params64["g.W"].data + params64["g.b"].data, atol=1e-12)

    def test_constant_features_stay_constant(self, params64):
        x = np.tile(np.array([0.5, -1.0, 2.0]), (4, 1))
        out = graph_conv(as_tensor(x), normalized_adjacency(PATH4), params64, "g", 2).data
        np.testing.assert_allclose(out - out[0], 0.0, atol=1e-12)

    def test_path_graph_hand_oracle(self, params64):
        x = np.array([[1.0], [2.0], [3.0], [4.0]])
        params64.get("g.W", (1, 1)).data[:] = 2.0
        out = graph_conv(as_tensor(x), normalized_adjacency(PATH4), params64, "g", 1).data
        # (A + I) rows: {0,1}, {0,1,2}, {1,2,3}, {2,3}, each averaged, then doubled
        np.testing.assert_allclose(out[:, 0], [3.0, 4.0, 6.0, 7.0], atol=1e-12)

    def test_asymmetric_adjacency(self):
        with pytest.raises(TemplateError):
            normalized_adjacency(np.triu(np.ones((3, 3)), 1))

    def test_size_mismatch(self, params64):
        with pytest.raises(TemplateError):
            graph_conv(as_tensor(np.ones((3, 2))), normalized_adjacency(PATH4), params64, "g", 1)


class TestUpsample:
    def test_zero_mesh(self, template, params64):
        mid, full = upsample_mesh(as_tensor(np.zeros((1, 48, 3))), params64, template)
        assert mid.shape == (1, 128, 3) and full.shape == (1, 384, 3)
        assert not mid.data.any() and not full.data.any()

    def test_translation_preserved_at_init(self, template, params64, rng):
        V = rng.normal(size=(1, 48, 3))
        t = np.array([0.3, -0.1, 0.2])
        _, a = upsample_mesh(as_tensor(V), params64, template)
        _, b = upsample_mesh(as_tensor(V + t), params64, template)
        np.testing.assert_allclose(b.data - a.data, np.broadcast_to(t, a.shape), atol=1e-12)


class TestCameras:
    def test_no_image_views(self, params64, profile):
        assert estimate_cameras([], params64, profile) == {}

    def test_identical_globals_identical_cameras(self, params64, profile, rng):
        g = as_tensor(rng.normal(size=(1, 64)))
        cams = estimate_cameras([(1, g), (2, g)], params64, profile)
        np.testing.assert_array_equal(cams[1].raw.data, cams[2].raw.data)

    def test_ground_truth_passthrough(self, params64, profile, sample, rng):
        gt = {1: [sample.cameras[1]], 2: [sample.cameras[2]]}
        g = as_tensor(rng.normal(size=(1, 64)))
        out = estimate_cameras([(1, g), (2, g)], params64, profile, gt_cameras=gt)
        assert out[1] is gt[1] and out[2] is gt[2]
        assert len(params64) == 0

    def test_estimate_matches_pinhole(self, params64, profile, rng):
        cam = estimate_cameras([(1, as_tensor(rng.normal(size=(1, 64))))], params64, profile)[1]
        pts = rng.normal(scale=0.3, size=(1, 5, 3))
        ref = cam.to_camera(0)
        np.testing.assert_allclose(cam.project(as_tensor(pts)).data[0], project_points(pts[0], ref), atol=1e-4)


class TestFtm:
    def test_locals_permutation(self, rng, params64, profile, template):
        q = as_tensor(rng.normal(size=(1, 56, 67)))
        locs = [(as_tensor(rng.normal(size=(1, 16, 67))), s.kind, s.view) for s in SLOTS]
        a, *_ = ftm_forward(q, locs, params64, profile, template)
        b, *_ = ftm_forward(q, [locs[i] for i in (4, 2, 0, 3, 1)], params64, profile, template)
        np.testing.assert_allclose(a.data, b.data, atol=1e-9, rtol=0)

    def test_width_mismatch(self, rng, params64, profile, template):
        q = as_tensor(rng.normal(size=(1, 56, 67)))
        with pytest.raises(BuildError):
            ftm_forward(q, [(as_tensor(np.zeros((1, 16, 60))), "radar", 1)], params64, profile, template)

    def test_empty_locals(self, rng, params64, profile, template):
        with pytest.raises(CombinationError):
            ftm_forward(as_tensor(rng.normal(size=(1, 56, 67))), [], params64, profile, template)

    def test_attention_and_layout(self, model64, sample):
        pred = model64.forward(sample.inputs)
        assert pred.attention[0].shape == (1, 4, 56 + 5 * 16, 56 + 5 * 16)
        assert [lbl for lbl, *_ in pred.token_sources] == ["queries"] + [s.label for s in SLOTS]
        assert all(rows.shape == (1, 16, 3) for _, rows in pred.local_outputs)


class TestAdaptiveFusion:
    def test_all_combinations_same_shapes(self, model64, sample):
        shapes = set()
        for combo in enumerate_combinations():
            pred = model64.forward(combo.select(sample.inputs))
            arrays = pred.numpy()
            assert all(np.isfinite(a).all() for a in arrays.values())
            shapes.add(tuple(a.shape for a in arrays.values()))
        assert shapes == {((1, 8, 3), (1, 48, 3), (1, 128, 3), (1, 384, 3))}

    def test_input_order_irrelevant(self, model64, sample):
        a = model64.forward(sample.inputs).joints.data
        b = model64.forward(sample.inputs[::-1]).joints.data
        np.testing.assert_array_equal(a, b)

    def test_radar_only_reaches_radar_encoder(self, model64, sample):
        pred = model64.forward([sample.input("radar", 1)])
        assert np.isfinite(pred.verts_full.data).all()
        grads = backward((pred.joints * pred.joints).sum(), model64.params)
        radar = [g for k, g in grads.items() if k.startswith("radar.")]
        assert radar and any(np.abs(g).max() > 0 for g in radar)

    def test_every_parameter_reachable(self, model64, batch, profile):
        pred = model64.forward(batch.inputs, gt_cameras=batch.cameras)
        loss, _ = compute_loss(pred, batch, batch.cameras, image_size=profile.image_size)
        grads = backward(loss, model64.params)
        assert set(grads) == set(model64.params.keys())
        dead = [k for k, g in grads.items() if not np.abs(g).max() > 0]
        assert dead == []

    def test_estimated_cameras_when_requested(self, model64, sample):
        pred = model64.forward(combination_from_id(0b00011).select(sample.inputs), use_gt_cameras=False)
        assert sorted(pred.cameras) == [1, 2]
        assert any(k.startswith("camera.") for k in model64.params.keys())

    def test_empty(self, model64):
        with pytest.raises(CombinationError):
            model64.forward([])

    def test_slot_labels(self):
        assert Slot("depth", 2).label == "dep2"
