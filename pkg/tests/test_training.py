import dataclasses
import math

import numpy as np
import pytest
import torch

from solar.backbones import BackboneSpec, DescriptorModel, extract_descriptors, to_tensor
from solar.errors import TrainingError, ValidationError
from solar.experiments import image_set
from solar.mining import MiningConfig, mine_epoch
from solar.training import DESK_PROFILE, FULL_PROFILE, ImageSet, TrainConfig, TrainReport, train

SMALL_MINING = MiningConfig(anchors_per_epoch=16, negatives_per_anchor=3, pool_size=48)
SMALL = TrainConfig(epochs=3, batch_size=4, lr=1e-3, lr_p=1e-2, mining=SMALL_MINING)


def state(model):
    return {k: v.clone() for k, v in model.state_dict().items()}


def same_state(a, b):
    return a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)


def without_time(report):
    return [dataclasses.replace(e, wall_time=0.0) for e in report.epochs]


def solar_model(seed=0):
    return DescriptorModel(BackboneSpec(soa_insertions=(4, 5), seed=seed))


def test_profiles():
    assert (FULL_PROFILE.epochs, FULL_PROFILE.batch_size, FULL_PROFILE.lr, FULL_PROFILE.lr_p) == (50, 8, 1e-6, 1e-4)
    assert FULL_PROFILE.decay == 0.01 and FULL_PROFILE.freeze_backbone and FULL_PROFILE.train_p
    assert (FULL_PROFILE.margin, FULL_PROFILE.lam) == (1.25, 10.0)
    assert DESK_PROFILE.mining.anchors_per_epoch == 64 and DESK_PROFILE.mining.pool_size == 512
    assert DESK_PROFILE.batch_size == 8 and DESK_PROFILE.margin == 1.25 and DESK_PROFILE.lam == 10.0


@pytest.mark.parametrize("changes", [{"epochs": -1}, {"batch_size": 0}, {"lr": 0.0},
                                     {"lr": 1e-3, "lr_p": 1e-4}, {"decay": -0.1},
                                     {"val_fraction": 1.0}])
def test_config_validation(changes):
    with pytest.raises(ValidationError):
        TrainConfig(**changes)


def test_imageset_lengths():
    with pytest.raises(ValidationError):
        ImageSet([np.zeros((32, 32, 3))], [0, 1], ["a"])


def test_zero_epochs_returns_input(small_bench):
    model = solar_model()
    before = state(model)
    out, report = train(model, image_set(small_bench), SMALL.replace(epochs=0))
    assert out is model and report.epochs == [] and same_state(before, state(model))


def test_freeze_backbone(small_bench):
    model = solar_model()
    before = [p.clone() for p in model.backbone_parameters()]
    soa_before = state(model.soa)
    out, report = train(model, image_set(small_bench), SMALL)
    assert all(torch.equal(a, b) for a, b in zip(before, out.backbone_parameters()))
    assert not same_state(soa_before, state(out.soa))
    assert all(p.requires_grad for p in out.parameters())


def test_unfrozen_backbone_moves(small_bench):
    model = DescriptorModel()
    before = [p.clone() for p in model.backbone_parameters()]
    out, _ = train(model, image_set(small_bench), SMALL.replace(freeze_backbone=False, epochs=1))
    assert not all(torch.equal(a, b) for a, b in zip(before, out.backbone_parameters()))


def test_report_fields_and_roundtrip(small_bench):
    _, report = train(solar_model(), image_set(small_bench), SMALL)
    assert [e.epoch for e in report.epochs] == [0, 1, 2]
    for e in report.epochs:
        assert all(math.isfinite(x) for x in (e.loss, e.fos, e.sos, e.val_loss, e.p, e.grad_norm))
        assert e.loss == pytest.approx(e.fos + 10.0 * e.sos, rel=1e-5)
        assert e.n_triplets == 16 * 3
    assert e.lr == pytest.approx(1e-3 * math.exp(-0.02))
    assert TrainReport.from_jsonl(report.to_jsonl()) == report


def test_fixed_seed_reproducible(small_bench):
    _, a = train(solar_model(), image_set(small_bench), SMALL)
    _, b = train(solar_model(), image_set(small_bench), SMALL)
    assert without_time(a) == without_time(b)


def test_resume_after_kill(small_bench, tmp_path):
    data, cfg = image_set(small_bench), SMALL.replace(epochs=4)
    straight, report = train(solar_model(), data, cfg)

    def kill(stats):
        if stats.epoch == 1:
            raise KeyboardInterrupt

    with pytest.raises(KeyboardInterrupt):
        train(solar_model(), data, cfg, checkpoint_dir=tmp_path, on_epoch=kill)
    assert TrainReport.from_jsonl((tmp_path / "report.jsonl").read_text()).epochs[-1].epoch == 1
    resumed, report2 = train(solar_model(), data, cfg, checkpoint_dir=tmp_path)
    assert without_time(report2) == without_time(report)
    assert same_state(state(straight), state(resumed))


def test_fresh_run_ignores_checkpoint(small_bench, tmp_path):
    data = image_set(small_bench)
    train(solar_model(), data, SMALL.replace(epochs=1), checkpoint_dir=tmp_path)
    _, report = train(solar_model(), data, SMALL.replace(epochs=1), checkpoint_dir=tmp_path, resume=False)
    assert [e.epoch for e in report.epochs] == [0]


def test_degenerate_objective_no_drift():
    img = np.random.default_rng(0).uniform(0, 1, (32, 32, 3))
    data = ImageSet([img] * 12, np.repeat(np.arange(4), 3), [f"i{k}" for k in range(12)])
    model = solar_model()
    before = state(model)
    cfg = SMALL.replace(lam=0.0, margin=0.0, mining=MiningConfig(8, 2, 12), val_fraction=0.0, epochs=2)
    out, report = train(model, data, cfg)
    assert all(e.loss == 0.0 for e in report.epochs)
    assert same_state(before, state(out))


def test_adversarial_lr_restores(small_bench):
    model = solar_model()
    with torch.no_grad():
        model.soa["5"].wpsi.fill_(0.01)  # nonzero gradients everywhere
    before = state(model)
    cfg = SMALL.replace(lr=math.inf, lr_p=math.inf)
    with pytest.raises(TrainingError, match="restored"):
        train(model, image_set(small_bench), cfg)
    assert all(torch.isfinite(v).all() for v in model.state_dict().values())
    assert same_state(before, state(model))


def test_p_projected(small_bench):
    model = DescriptorModel()
    with torch.no_grad():
        model.gem.p.fill_(1.0)
    seen = []
    # a large p step pushes below 1 unless projected
    cfg = SMALL.replace(lr_p=5.0, freeze_backbone=False, lam=0.0)
    _, report = train(model, image_set(small_bench), cfg, on_epoch=lambda s: seen.append(model.gem.p.item()))
    assert min(seen) >= 1.0 and all(e.p >= 1.0 for e in report.epochs)


def test_p_frozen_flag(small_bench):
    model = solar_model()
    out, _ = train(model, image_set(small_bench), SMALL.replace(train_p=False))
    assert out.gem.p.item() == 3.0


def reference_gem_training(model, data, cfg):
    """Plain GeM triplet training written out by hand: first-order loss only."""
    mining = dataclasses.replace(cfg.mining, seed=cfg.seed)
    body = list(model.backbone.parameters())
    opt = torch.optim.Adam([{"params": body, "lr": cfg.lr}, {"params": [model.gem.p], "lr": cfg.lr_p}])
    bases = [cfg.lr, cfg.lr_p]
    train_idx = np.arange(len(data))
    for epoch in range(cfg.epochs):
        for g, base in zip(opt.param_groups, bases):
            g["lr"] = base * math.exp(-cfg.decay * epoch)
        model.eval()
        descs = extract_descriptors(data.images, model)
        groups = mine_epoch(descs, data.labels, data.ids, mining, epoch, candidates=train_idx)
        model.train()
        for b in range(0, len(groups), cfg.batch_size):
            flat = [t for grp in groups[b:b + cfg.batch_size] for t in grp]
            desc = lambda attr: model(to_tensor(np.stack([data.images[getattr(t, attr)] for t in flat]),
                                                model.dtype))
            a, p, n = desc("anchor"), desc("positive"), desc("negative")
            d_ap, d_an = ((a - p) ** 2).sum(1), ((a - n) ** 2).sum(1)
            loss = torch.clamp(d_ap - d_an + cfg.margin, min=0).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
            with torch.no_grad():
                model.gem.p.clamp_(min=1.0)
    return model


def test_lambda_zero_matches_reference(small_bench):
    data = image_set(small_bench)
    cfg = SMALL.replace(lam=0.0, freeze_backbone=False, val_fraction=0.0, epochs=2)
    ref = DescriptorModel(BackboneSpec(seed=4)).double()
    ours = DescriptorModel(BackboneSpec(soa_insertions=(4, 5), seed=4)).double()
    ref.whitening.requires_grad_(False)
    ours.whitening.requires_grad_(False)
    for block in ours.soa.values():
        block.wpsi.requires_grad_(False)
    reference_gem_training(ref, data, cfg)
    train(ours, data, cfg)
    mine = {k: v for k, v in ours.state_dict().items() if not k.startswith("soa.")}
    theirs = ref.state_dict()
    assert mine.keys() == theirs.keys()
    moved = max((theirs[k] - DescriptorModel(BackboneSpec(seed=4)).double().state_dict()[k]).abs().max().item()
                for k in theirs)
    assert moved > 1e-4
    for k in mine:
        assert torch.allclose(mine[k], theirs[k], rtol=0, atol=1e-10), k
    assert all(torch.count_nonzero(b.wpsi) == 0 for b in ours.soa.values())


def test_loss_decreases_on_benchmark(bench):
    cfg = DESK_PROFILE.replace(epochs=5)
    _, report = train(solar_model(), image_set(bench), cfg)
    assert report.epochs[4].loss < report.epochs[0].loss
