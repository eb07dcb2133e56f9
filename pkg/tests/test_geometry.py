import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from pgvton import geometry as G
from pgvton.errors import ValidationError

torch.set_default_dtype(torch.float32)


def _affine_grid(scale, a, t, dtype=torch.float64):
    static = G.static_grid(scale, dtype)
    return static, static @ torch.as_tensor(a, dtype=dtype).T + torch.as_tensor(t, dtype=dtype)


def _random_points(n, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(n, 2, generator=g, dtype=dtype) * 2 - 1


# control grids and fitting -------------------------------------------------


def test_static_grid_is_uniform_lattice():
    g = G.static_grid(3)
    assert g.shape == (3, 3, 2)
    assert torch.equal(g[0, :, 0], torch.tensor([-1.0, 0.0, 1.0]))
    assert torch.equal(g[:, 0, 1], torch.tensor([-1.0, 0.0, 1.0]))


def test_identity_fit_has_identity_affine_and_no_kernel():
    for s in G.SCALES:
        static = G.static_grid(s, torch.float64)
        c = G.tps_fit(static, static)
        assert torch.allclose(c.affine[0], torch.tensor([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], dtype=torch.float64),
                              atol=1e-9)
        assert c.kernel.abs().max() < 1e-9


@pytest.mark.parametrize("scale", G.SCALES)
def test_translation_is_reproduced_everywhere(scale):
    static, warped = _affine_grid(scale, np.eye(2), (0.1, -0.2))
    c = G.tps_fit(static, warped)
    pts = _random_points(1000, scale)
    expect = pts + torch.tensor([0.1, -0.2], dtype=torch.float64)
    assert (G.tps_apply(c, pts)[0] - expect).abs().max() < 1e-6


@pytest.mark.parametrize("scale", G.SCALES)
def test_linear_map_is_reproduced_everywhere(scale):
    rng = np.random.default_rng(scale)
    a = rng.normal(size=(2, 2))
    while abs(np.linalg.det(a)) < 0.2:
        a = rng.normal(size=(2, 2))
    static, warped = _affine_grid(scale, a, (0.0, 0.0))
    c = G.tps_fit(static, warped)
    pts = _random_points(1000, 10 + scale)
    expect = pts @ torch.as_tensor(a).T
    assert (G.tps_apply(c, pts)[0] - expect).abs().max() < 1e-6


@settings(max_examples=25, deadline=None)
@given(st.sampled_from(G.SCALES), st.integers(0, 2**31 - 1))
def test_fit_interpolates_control_points(scale, seed):
    g = torch.Generator().manual_seed(seed)
    static = G.static_grid(scale, torch.float64)
    warped = static + (torch.rand(scale, scale, 2, generator=g, dtype=torch.float64) - 0.5) * 0.4
    c = G.tps_fit(static, warped)
    back = G.tps_apply(c, static.reshape(-1, 2))[0].reshape(scale, scale, 2)
    assert (back - warped).abs().max() < 1e-6


@settings(max_examples=25, deadline=None)
@given(st.sampled_from(G.SCALES), st.integers(0, 2**31 - 1), st.floats(-2, 2), st.floats(-2, 2))
def test_spline_is_linear_in_the_warped_grid(scale, seed, alpha, beta):
    g = torch.Generator().manual_seed(seed)
    static = G.static_grid(scale, torch.float64)
    w1 = static + torch.randn(scale, scale, 2, generator=g, dtype=torch.float64) * 0.1
    w2 = static + torch.randn(scale, scale, 2, generator=g, dtype=torch.float64) * 0.1
    pts = _random_points(200, seed % 1000)
    combo = G.tps_apply(G.tps_fit(static, alpha * w1 + beta * w2), pts)
    parts = alpha * G.tps_apply(G.tps_fit(static, w1), pts) + beta * G.tps_apply(G.tps_fit(static, w2), pts)
    assert (combo - parts).abs().max() < 1e-6


def test_fit_rejects_mismatched_grids():
    with pytest.raises(ValidationError):
        G.tps_fit(G.static_grid(3), G.static_grid(4))


def test_batched_fit_matches_single_fits():
    static = G.static_grid(4, torch.float64)
    warped = static + torch.randn(3, 4, 4, 2, dtype=torch.float64) * 0.1
    batched = G.tps_fit(static, warped)
    for i in range(3):
        single = G.tps_fit(static, warped[i])
        assert torch.allclose(batched.kernel[i], single.kernel[0])
        assert torch.allclose(batched.affine[i], single.affine[0])


# sampling fields -----------------------------------------------------------


def test_identity_coefficients_give_pixel_lattice():
    static = G.static_grid(5)
    field = G.build_sampling_field(G.tps_fit(static, static), 16, 12)
    assert field.shape == (1, 16, 12, 2)
    assert torch.allclose(field[0], G.pixel_lattice(16, 12), atol=1e-6)


def test_translation_coefficients_shift_field_uniformly():
    static, warped = _affine_grid(4, np.eye(2), (0.25, -0.125))
    field = G.build_sampling_field(G.tps_fit(static, warped), 8, 6)[0]
    shift = field - G.pixel_lattice(8, 6, torch.float64)
    assert torch.allclose(shift[..., 0], torch.full((8, 6), 0.25, dtype=torch.float64), atol=1e-9)
    assert torch.allclose(shift[..., 1], torch.full((8, 6), -0.125, dtype=torch.float64), atol=1e-9)


def test_field_finite_for_bounded_random_offsets():
    torch.manual_seed(0)
    for s in G.SCALES:
        static = G.static_grid(s)
        warped = static + (torch.rand(8, s, s, 2) - 0.5)
        field = G.build_sampling_field(G.tps_fit(static, warped), 32, 24)
        assert torch.isfinite(field).all()


# warping -------------------------------------------------------------------


def test_identity_field_passes_image_through_exactly():
    torch.manual_seed(0)
    img = torch.rand(2, 3, 16, 12)
    assert torch.equal(G.warp_image(img, G.pixel_lattice(16, 12)), img)


def test_identity_spline_warp_is_exact():
    torch.manual_seed(1)
    img = torch.rand(2, 3, 32, 24)
    for s in G.SCALES:
        static = G.static_grid(s)
        field = G.build_sampling_field(G.tps_fit(static, static.expand(2, -1, -1, -1)), 32, 24)
        assert torch.equal(G.warp_image(img, field), img)


@pytest.mark.parametrize("dx,dy", [(1, 0), (0, 2), (-3, 1), (2, -2)])
def test_integer_translation_moves_one_hot_pixel(dx, dy):
    h, w = 10, 8
    img = torch.zeros(1, 1, h, w)
    img[0, 0, 4, 3] = 1.0
    field = G.pixel_lattice(h, w).clone()
    # backward warp: output (y, x) reads the source at (y - dy, x - dx)
    field[..., 0] -= 2 * dx / w
    field[..., 1] -= 2 * dy / h
    out = G.warp_image(img, field)
    expect = torch.zeros_like(img)
    expect[0, 0, 4 + dy, 3 + dx] = 1.0
    assert torch.equal(out, expect)


def test_out_of_range_field_gives_zeros():
    img = torch.rand(1, 3, 8, 8)
    field = torch.full((8, 8, 2), 3.0)
    assert torch.equal(G.warp_image(img, field), torch.zeros_like(img))


def test_half_pixel_shift_averages_neighbours():
    img = torch.tensor([[[[0.0, 1.0, 0.0, 1.0]]]])
    field = G.pixel_lattice(1, 4).clone()
    field[..., 0] += 1.0 / 4  # half a pixel right
    out = G.warp_image(img, field)
    assert torch.allclose(out[0, 0, 0, :3], torch.full((3,), 0.5))
    assert out[0, 0, 0, 3] == pytest.approx(0.5)  # half of the last pixel, half zero padding


def test_warp_rejects_bad_shapes():
    with pytest.raises(ValidationError):
        G.warp_image(torch.rand(3, 8, 8), G.pixel_lattice(8, 8))
    with pytest.raises(ValidationError):
        G.warp_image(torch.rand(2, 3, 8, 8), torch.zeros(3, 8, 8, 2))


# selection -----------------------------------------------------------------


def _brute_force_selection(masks, target, source, tau):
    """Pure-numpy evaluation of every candidate; first minimum wins."""
    masks, target, source = (np.asarray(x, dtype=np.float64) for x in (masks, target, source))
    out = []
    for b in range(masks.shape[0]):
        best, best_cost = None, None
        for i, s in enumerate(G.SCALES):
            cost = tau * np.mean(np.abs(masks[b, i] - target[b])) + (1 - tau) * np.mean(np.abs(masks[b, i] - source[b]))
            if best_cost is None or cost < best_cost:
                best, best_cost = s, cost
        out.append(best)
    return out


def test_candidate_matching_both_masks_wins():
    torch.manual_seed(0)
    target = (torch.rand(1, 1, 8, 8) > 0.5).float()
    masks = torch.rand(1, 4, 1, 8, 8)
    masks[0, 0] = target[0]
    assert G.select_optimal(masks, target, target, 0.2).tolist() == [3]


def test_tau_zero_uses_source_term_only():
    torch.manual_seed(1)
    masks = torch.rand(5, 4, 1, 6, 6)
    target, source = torch.rand(5, 1, 6, 6), torch.rand(5, 1, 6, 6)
    only_source = (masks - source[:, None]).abs().mean(dim=(2, 3, 4)).argmin(1)
    got = G.select_optimal(masks, target, source, 0.0)
    assert got.tolist() == [G.SCALES[i] for i in only_source]


def test_ties_go_to_lowest_scale():
    m = torch.rand(1, 1, 1, 5, 5).expand(1, 4, 1, 5, 5).clone()
    assert G.select_optimal(m, torch.rand(1, 1, 5, 5), torch.rand(1, 1, 5, 5), 0.2).tolist() == [3]
    m[0, 0] += 1.0  # scale 3 is now worse; 4, 5, 6 remain tied
    assert G.select_optimal(m, torch.zeros(1, 1, 5, 5), torch.zeros(1, 1, 5, 5), 0.5).tolist() == [4]


@pytest.mark.parametrize("tau", [0.0, 0.2, 1.0])
def test_selection_matches_brute_force(tau):
    rng = np.random.default_rng(int(tau * 10))
    masks = rng.random((100, 4, 1, 8, 6)).astype(np.float32)
    target = rng.random((100, 1, 8, 6)).astype(np.float32)
    source = rng.random((100, 1, 8, 6)).astype(np.float32)
    got = G.select_optimal(torch.from_numpy(masks), torch.from_numpy(target), torch.from_numpy(source), tau)
    assert got.tolist() == _brute_force_selection(masks, target, source, tau)


def test_selection_invariant_to_constant_added_to_all_masks():
    torch.manual_seed(2)
    masks, target, source = torch.rand(20, 4, 1, 6, 6), torch.rand(20, 1, 6, 6), torch.rand(20, 1, 6, 6)
    a = G.select_optimal(masks, target, source, 0.3)
    b = G.select_optimal(masks + 0.25, target + 0.25, source + 0.25, 0.3)
    assert torch.equal(a, b)


def test_selection_from_candidate_set_and_tau_validation():
    torch.manual_seed(3)
    img, mask = torch.rand(2, 3, 16, 12), (torch.rand(2, 1, 16, 12) > 0.5).float()
    grids = {s: G.static_grid(s).expand(2, -1, -1, -1) for s in G.SCALES}
    cands = G.warp_candidates(img, mask, grids)
    assert cands.scales == G.SCALES
    # identity warps all equal the source mask: tie, lowest scale
    assert G.select_optimal(cands, mask, mask, 0.2).tolist() == [3, 3]
    with pytest.raises(ValidationError):
        G.select_optimal(cands, mask, mask, 1.5)


def test_gather_selected_picks_per_sample():
    stacked = torch.arange(2 * 4).float().reshape(2, 4)
    assert G.gather_selected(stacked, torch.tensor([5, 3])).tolist() == [2.0, 4.0]


# regularisation and composition -------------------------------------------


def test_grid_regularization_values():
    statics = [G.static_grid(s, torch.float64) for s in G.SCALES]
    assert G.grid_regularization([(s, s) for s in statics]).item() == 0.0
    shifted = statics[1].clone()
    shifted[..., 0] += 0.1
    pairs = [(statics[0], statics[0]), (shifted, statics[1]), (statics[2], statics[2]), (statics[3], statics[3])]
    assert G.grid_regularization(pairs).item() == pytest.approx(0.005, abs=1e-9)
    shifted2 = statics[1].clone()
    shifted2[..., 0] += 0.2
    pairs[1] = (shifted2, statics[1])
    assert G.grid_regularization(pairs).item() == pytest.approx(0.02, abs=1e-9)


def test_composite_endpoints_and_midpoint():
    a, b = torch.rand(2, 3, 4, 4), torch.rand(2, 3, 4, 4)
    assert torch.equal(G.composite(a, b, torch.ones(2, 1, 4, 4)), a)
    assert torch.equal(G.composite(a, b, torch.zeros(2, 1, 4, 4)), b)
    out = G.composite(torch.full((1, 3, 2, 2), 0.2), torch.full((1, 3, 2, 2), 0.8), torch.full((1, 1, 2, 2), 0.5))
    assert torch.allclose(out, torch.full((1, 3, 2, 2), 0.5))
    with pytest.raises(ValidationError):
        G.composite(a, torch.rand(2, 3, 5, 5), torch.ones(2, 1, 4, 4))


# gradients -----------------------------------------------------------------


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_warp_is_linear_in_the_image(seed, a, b):
    g = torch.Generator().manual_seed(seed)
    x = torch.rand(2, 3, 12, 10, generator=g, dtype=torch.float64)
    y = torch.rand(2, 3, 12, 10, generator=g, dtype=torch.float64)
    field = G.pixel_lattice(12, 10, torch.float64) + (torch.rand(2, 12, 10, 2, generator=g, dtype=torch.float64) - 0.5) * 0.6
    lhs = G.warp_image(a * x + b * y, field)
    rhs = a * G.warp_image(x, field) + b * G.warp_image(y, field)
    assert (lhs - rhs).abs().max() < 1e-6


def test_near_coincident_points_do_not_crash():
    static = G.static_grid(3, torch.float64)
    warped = static.clone()
    warped[0, 0] = warped[0, 1] + 1e-12
    c = G.tps_fit(static, warped)
    assert torch.isfinite(c.kernel).all() and torch.isfinite(c.affine).all()


def test_warp_gradient_flows_to_field_and_image():
    img = torch.rand(1, 3, 8, 8, requires_grad=True)
    field = (G.pixel_lattice(8, 8) + 0.03).requires_grad_(True)
    G.warp_image(img, field).sum().backward()
    assert img.grad.abs().sum() > 0 and field.grad.abs().sum() > 0
