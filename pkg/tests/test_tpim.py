import dataclasses

import pytest
import torch

from pgvton import synthdata as sd
from pgvton import tpim
from pgvton.errors import ValidationError
from pgvton.training import LossLog, running_mean

from conftest import SMOKE_ITERATIONS, smoke_config


@pytest.fixture(scope="module")
def batch():
    return sd.to_tensors(sd.generate(4, seed=7))


def _sleeve_pair(spec):
    long = sd.to_tensors([sd.render_sample(dataclasses.replace(spec, sleeve_length=1.0))])
    short = sd.to_tensors([sd.render_sample(dataclasses.replace(spec, sleeve_length=0.0))])
    return long, short


def skin_masses(model, samples):
    """(predicted skin mass, source skin mass) for long-sleeve people given a sleeveless garment."""
    pred, src = [], []
    with torch.no_grad():
        for s in samples:
            long, short = _sleeve_pair(s.spec)
            out = tpim.infer_parsing(long["pr_parsing"], long["pose"], short["garment_mask"], model)
            pred.append(out.skin.sum().item())
            src.append(long["ps_mask"].sum().item())
    return pred, src


def test_untrained_output_is_a_distribution(batch):
    model = tpim.build_model(smoke_config())
    out = tpim.infer_parsing(batch["pr_parsing"], batch["pose"], batch["garment_mask"], model).parsing
    assert out.shape == (4, 7, 64, 48)
    assert (out > 0).all() and (out < 1).all()
    assert (out.sum(1) - 1).abs().max() < 1e-6


def test_zero_garment_mask_is_still_valid(batch):
    model = tpim.build_model(smoke_config())
    out = tpim.infer_parsing(batch["pr_parsing"], batch["pose"], torch.zeros_like(batch["garment_mask"]), model)
    assert torch.isfinite(out.parsing).all()
    assert (out.parsing.sum(1) - 1).abs().max() < 1e-6


def test_inference_is_deterministic_in_eval(batch):
    model = tpim.build_model(smoke_config()).eval()
    a = tpim.infer_parsing(batch["pr_parsing"], batch["pose"], batch["garment_mask"], model).parsing
    b = tpim.infer_parsing(batch["pr_parsing"], batch["pose"], batch["garment_mask"], model).parsing
    assert torch.equal(a, b)


def test_mismatched_inputs_rejected(batch):
    model = tpim.build_model(smoke_config())
    with pytest.raises(ValidationError):
        tpim.infer_parsing(batch["pr_parsing"], batch["pose"][..., :40], batch["garment_mask"], model)
    with pytest.raises(ValidationError):
        tpim.infer_parsing(batch["pr_parsing"][:, :4], batch["pose"], batch["garment_mask"], model)


# split_tryon ----------------------------------------------------------------


def test_split_one_hot_garment_pixel():
    m = torch.zeros(1, 7, 2, 2)
    m[:, sd.BACKGROUND] = 1
    m[0, :, 0, 1] = 0
    m[0, sd.UPPER_GARMENT, 0, 1] = 1
    g, s, r = tpim.split_tryon(m)
    assert g[0, 0, 0, 1] == 1 and g.sum() == 1
    assert s.sum() == 0 and r.sum() == 0


def test_split_background_pixel_is_empty():
    m = torch.zeros(1, 7, 1, 1)
    m[:, sd.BACKGROUND] = 1
    assert all(t.sum() == 0 for t in tpim.split_tryon(m))


def test_split_reassembles_soft_parsing():
    m = torch.softmax(torch.randn(3, 7, 5, 6, generator=torch.Generator().manual_seed(0)), 1)
    g, s, r = tpim.split_tryon(m)
    rebuilt = r.clone()
    rebuilt[:, sd.UPPER_GARMENT] = g[:, 0]
    rebuilt[:, sd.UPPER_SKIN] = s[:, 0]
    rebuilt[:, sd.BACKGROUND] = m[:, sd.BACKGROUND]
    assert torch.equal(rebuilt, m)
    assert ((g + s) <= 1).all()


# loss -----------------------------------------------------------------------


def test_loss_zero_on_identical():
    p = torch.softmax(torch.randn(2, 7, 4, 4), 1)
    assert tpim.tpim_loss(p, p, p, p).item() == 0.0


def test_loss_constant_offset_example():
    p = torch.softmax(torch.randn(2, 7, 4, 4), 1)
    r = p[:, tpim.REMAINDER]
    loss = tpim.tpim_loss(r + 0.1, r, p, p, lambda1=2.0, lambda2=2.0)
    assert loss.item() == pytest.approx(0.2, abs=1e-6)


def test_loss_scales_with_lambdas():
    g = torch.Generator().manual_seed(1)
    a, b, c, d = (torch.rand(2, 7, 4, 4, generator=g) for _ in range(4))
    base = tpim.tpim_loss(a, b, c, d, 2.0, 2.0)
    assert tpim.tpim_loss(a, b, c, d, 6.0, 6.0).item() == pytest.approx(3 * base.item(), rel=1e-6)
    assert base.item() >= 0


def test_lambda2_zero_cuts_second_term_gradient():
    g = torch.Generator().manual_seed(2)
    a, b, c, d = (torch.rand(2, 7, 4, 4, generator=g) for _ in range(4))
    c.requires_grad_(True)
    tpim.tpim_loss(a, b, c, d, 2.0, 0.0).backward()
    assert torch.equal(c.grad, torch.zeros_like(c))


def test_loss_shape_mismatch():
    with pytest.raises(ValidationError):
        tpim.tpim_loss(torch.zeros(1, 4, 2, 2), torch.zeros(1, 4, 2, 3), torch.zeros(1, 7, 2, 2), torch.zeros(1, 7, 2, 2))


# training -------------------------------------------------------------------


def test_cycle_feeds_pass_one_remainder_into_pass_two(batch):
    model = tpim.build_model(smoke_config())
    seen = []
    handle = model.register_forward_hook(lambda mod, args, out: seen.append((args, out)))
    partner = torch.tensor([1, 0, 3, 2])
    pass1, remainder, recon = tpim.cycle_forward(model, batch, partner)
    handle.remove()
    assert len(seen) == 2
    (args1, out1), (args2, out2) = seen
    assert torch.equal(args1[2], batch["garment_mask"][partner])
    assert args2[0] is remainder
    assert torch.equal(remainder, sd.derive_remainder(out1))
    assert torch.equal(args2[2], batch["garment_mask"])
    assert out2 is recon
    # no detachment inside the cycle
    assert remainder.requires_grad


def test_training_is_reproducible():
    samples = sd.generate(6, seed=3)
    cfg = smoke_config(tpim_batch=4)
    m1, c1 = tpim.train_tpim(samples, cfg, iterations=3)
    m2, c2 = tpim.train_tpim(samples, cfg, iterations=3)
    for a, b in zip(m1.state_dict().values(), m2.state_dict().values()):
        assert torch.equal(a, b)
    assert c1.metadata["iterations"] == 3


def test_identical_samples_train_deterministically():
    one = sd.generate(1, seed=3)[0]
    samples = [dataclasses.replace(one, sample_id=f"c{i}") for i in range(4)]
    cfg = smoke_config(tpim_batch=4)
    a, _ = tpim.train_tpim(samples, cfg, iterations=2)
    b, _ = tpim.train_tpim(samples, cfg, iterations=2)
    assert all(torch.equal(x, y) for x, y in zip(a.parameters(), b.parameters()))


def test_training_needs_two_samples():
    with pytest.raises(ValidationError):
        tpim.train_tpim(sd.generate(1, seed=0), smoke_config(), iterations=1)


def test_smoke_loss_drops(smoke):
    r = running_mean(LossLog.unpack(smoke.ckpts["tpim"], tpim.LOG_COLUMNS).column("loss"))
    assert len(r) == SMOKE_ITERATIONS
    assert r[-1] < 0.6 * r[0]


def test_long_to_short_sleeves_grow_skin(smoke, extended_tpim):
    model, _ = extended_tpim
    pred, src = skin_masses(model, smoke.test)
    assert sum(pred) > sum(src)
    assert sum(p > s for p, s in zip(pred, src)) >= 12


@pytest.mark.xfail(strict=True, reason="re-exposed arm skin is learned only after roughly 700 TPIM steps")
def test_long_to_short_sleeves_grow_skin_at_smoke_length(smoke):
    pred, src = skin_masses(smoke.models["tpim"], smoke.test)
    assert sum(pred) > sum(src)
