import json
import math

import numpy as np
import pytest
import torch

from pe_advseg.discriminator import DiscriminatorConfig
from pe_advseg.phantom import PhantomSpec, generate_dataset
from pe_advseg.segnet import SegNetConfig, desk_config
from pe_advseg.training import (
    Checkpoint, CheckpointError, EmptyDataset, MissingPretrain, TrainingConfig, adversarial_loss,
    bce_dice_loss, build_discriminator, decode_params, discriminator_loss, discriminator_step,
    encode_params, fine_tune, params_hash, poly_lr, segmentation_step, semi_supervised_loss,
    train_semi, train_supervised, volumes_to_tensors,
)

TINY_DISC = DiscriminatorConfig(channel_widths=(8, 8, 8, 8, 1))


def tiny_net():
    return SegNetConfig.from_dict({**desk_config(64).to_dict(), "stem_channels": 8,
                                   "branch_widths": [4, 8, 8], "fused_channels": 8})


@pytest.fixture(scope="module")
def data():
    spec = PhantomSpec(image_size=64, n_slices_per_patient=2, lesion_radius_range=(2, 4))
    return generate_dataset(spec, 2, seed=0, prefix="l"), generate_dataset(spec, 2, seed=1, prefix="u")


@pytest.fixture(scope="module")
def pretrained(data):
    labeled, _ = data
    cfg = TrainingConfig(epochs=2, batch_size=2, seg_lr=0.01, seed=3)
    return train_supervised(cfg, labeled, tiny_net())


# ---------------------------------------------------------------- losses

def test_bce_dice_perfect():
    gt = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
    logits = torch.where(gt > 0, 20.0, -20.0)
    assert bce_dice_loss(logits, gt, 1.0).item() < 1e-6


def test_bce_dice_zero_logits():
    # BCE = ln 2; dice = 1 - (0 + 1) / (2 + 0 + 1) = 2/3
    val = bce_dice_loss(torch.zeros(2, 2, dtype=torch.float64), torch.zeros(2, 2), 1.0).item()
    assert abs(val - (math.log(2) + 2 / 3)) < 1e-6
    assert abs(val - 1.3598) < 1e-4


def test_bce_dice_decomposes():
    torch.manual_seed(0)
    logits = torch.randn(2, 1, 5, 5, dtype=torch.float64)
    gt = (torch.rand(2, 1, 5, 5) > 0.5).double()
    pure = torch.nn.functional.binary_cross_entropy_with_logits(logits, gt)
    assert torch.allclose(bce_dice_loss(logits, gt, dice_weight=0.0), pure, atol=1e-12)


def test_discriminator_loss_values():
    half = torch.full((4, 4), 0.5, dtype=torch.float64)
    assert abs(discriminator_loss(half, half).item() - 2 * math.log(2)) < 1e-6
    p9 = torch.full((4, 4), 0.9, dtype=torch.float64)
    assert abs(discriminator_loss(p9, p9).item() - (-math.log(0.1) - math.log(0.9))) < 1e-6
    eps = 1e-7
    perfect = discriminator_loss(torch.full((4, 4), eps, dtype=torch.float64),
                                 torch.full((4, 4), 1 - eps, dtype=torch.float64)).item()
    assert perfect < 1e-6


def test_adversarial_loss_values():
    assert adversarial_loss(torch.full((3, 3), 1 - 1e-7, dtype=torch.float64)).item() < 1e-6
    assert abs(adversarial_loss(torch.full((3, 3), 0.5, dtype=torch.float64)).item() - math.log(2)) < 1e-6
    assert abs(adversarial_loss(torch.full((3, 3), 0.25, dtype=torch.float64)).item() + math.log(0.25)) < 1e-6


def test_semi_loss_values():
    logits = torch.where(torch.rand(4, 4) > 0.5, 20.0, -20.0).double()
    assert semi_supervised_loss(torch.zeros(4, 4), logits, 0.2).item() == 0.0
    assert semi_supervised_loss(torch.ones(4, 4), logits, 0.2).item() < 1e-6
    conf = torch.zeros(4, 4)
    conf[:2] = 1.0
    mixed = logits.clone()
    mixed[:2] = 0.0  # sigmoid 0.5 -> pseudo label 1 -> BCE ln 2
    assert abs(semi_supervised_loss(conf, mixed, 0.2).item() - math.log(2)) < 1e-6


def test_loss_shape_errors():
    with pytest.raises(ValueError):
        bce_dice_loss(torch.zeros(2, 2), torch.zeros(3, 3))
    with pytest.raises(ValueError):
        discriminator_loss(torch.zeros(2, 2), torch.zeros(3, 3))
    with pytest.raises(ValueError):
        semi_supervised_loss(torch.zeros(2, 2), torch.zeros(3, 3), 0.2)


def test_losses_finite_and_nonnegative_when_saturated():
    rng = np.random.default_rng(0)
    for _ in range(20):
        conf = torch.from_numpy(rng.choice([0.0, 1.0, 0.3], size=(1, 1, 4, 4)))
        other = torch.from_numpy(rng.choice([0.0, 1.0], size=(1, 1, 4, 4)))
        logits = torch.from_numpy(rng.normal(0, 50, size=(1, 1, 4, 4)))
        for v in (discriminator_loss(conf, other), adversarial_loss(conf),
                  semi_supervised_loss(conf, logits, 0.2), bce_dice_loss(logits, other)):
            assert torch.isfinite(v) and v.item() >= 0


def test_poly_lr():
    assert poly_lr(1e-4, 0, 100, 0.9) == 1e-4
    assert poly_lr(1e-4, 50, 100, 0.9) == pytest.approx(1e-4 * 0.5 ** 0.9)


def test_config_validation():
    for bad in (dict(seg_lr=0), dict(momentum=1.0), dict(t_semi=1.0), dict(phase="x")):
        with pytest.raises(ValueError):
            TrainingConfig(**bad)
    cfg = TrainingConfig.semi()
    assert (cfg.seg_lr, cfg.disc_lr, cfg.momentum) == (2e-4, 1e-4, 0.9)
    assert TrainingConfig.from_dict(cfg.to_dict()) == cfg


# ---------------------------------------------------------------- training

def test_supervised_history_and_determinism(data, pretrained):
    labeled, _ = data
    assert len(pretrained.loss_history) == 2
    again = train_supervised(pretrained.config, labeled, tiny_net())
    assert again.loss_history == pretrained.loss_history
    assert params_hash(again.seg_state) == params_hash(pretrained.seg_state)


def test_empty_and_missing_pretrain(data):
    labeled, unlabeled = data
    with pytest.raises(EmptyDataset):
        train_supervised(TrainingConfig(epochs=1), [], tiny_net())
    with pytest.raises(MissingPretrain):
        train_semi(TrainingConfig.semi(epochs=1), labeled, unlabeled, None)
    with pytest.raises(MissingPretrain):
        fine_tune(TrainingConfig(phase="finetune", epochs=1), unlabeled, None)


def test_semi_degenerates_to_supervised(data, pretrained):
    labeled, _ = data
    cfg = TrainingConfig(phase="semi", epochs=3, batch_size=2, seg_lr=0.01, seed=9,
                         lambda_adv_labeled=0.0, lambda_adv_unlabeled=0.0, lambda_semi=0.0)
    sup_hashes, semi_hashes = [], []
    train_supervised(cfg, labeled, init=pretrained,
                     epoch_callback=lambda e, seg, d: sup_hashes.append(params_hash(seg)))
    train_semi(cfg, labeled, [], pretrained, TINY_DISC,
               epoch_callback=lambda e, seg, d: semi_hashes.append(params_hash(seg)))
    assert len(sup_hashes) == 3 and sup_hashes == semi_hashes


def test_semi_runs_without_unlabeled(data, pretrained):
    labeled, _ = data
    ck = train_semi(TrainingConfig.semi(epochs=1, batch_size=2), labeled, [], pretrained, TINY_DISC)
    assert ck.disc_state is not None and len(ck.loss_history) == 1


def test_gradient_isolation(data, pretrained):
    labeled, unlabeled = data
    cfg = TrainingConfig.semi(batch_size=2, seg_lr=0.01, disc_lr=1e-3)
    seg = pretrained.build_segnet().train()
    disc = build_discriminator(seg, pretrained, TINY_DISC, 0)
    opt_s = torch.optim.SGD(seg.parameters(), lr=cfg.seg_lr, momentum=cfg.momentum)
    opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.disc_lr)
    xl, yl = volumes_to_tensors(labeled)
    xu, _ = volumes_to_tensors(unlabeled, labeled=False)

    d0, s0 = params_hash(disc), params_hash(seg)
    _, out_l = segmentation_step(seg, disc, opt_s, cfg, xl[:2], yl[:2], xu[:2])
    d1, s1 = params_hash(disc), params_hash(seg)
    assert d1 == d0 and s1 != s0

    discriminator_step(disc, opt_d, out_l, yl[:2])
    assert params_hash(seg) == s1 and params_hash(disc) != d1

    # unlabeled-only step never touches the discriminator
    d2, s2 = params_hash(disc), params_hash(seg)
    segmentation_step(seg, disc, opt_s, cfg, x_unl=xu[2:])
    assert params_hash(disc) == d2 and params_hash(seg) != s2


def test_fine_tune_zero_epochs_is_identity(data, pretrained):
    _, unlabeled = data
    ck = fine_tune(TrainingConfig(phase="finetune", epochs=0), unlabeled, pretrained, TINY_DISC)
    assert params_hash(ck.seg_state) == params_hash(pretrained.seg_state)


def test_fine_tune_freezes_discriminator(data, pretrained):
    labeled, unlabeled = data
    semi = train_semi(TrainingConfig.semi(epochs=1, batch_size=2), labeled, unlabeled, pretrained, TINY_DISC)
    ft = fine_tune(TrainingConfig(phase="finetune", epochs=1, batch_size=2, seg_lr=0.01), unlabeled, semi)
    assert params_hash(ft.disc_state) == params_hash(semi.disc_state)
    assert params_hash(ft.seg_state) != params_hash(semi.seg_state)
    assert ft.init_hash == semi.manifest_hash


# ---------------------------------------------------------------- checkpoints

def test_param_blob_round_trip():
    state = {"b": torch.arange(6, dtype=torch.float32).view(2, 3), "a": torch.tensor(7, dtype=torch.int64)}
    back = decode_params(encode_params(state))
    assert set(back) == {"a", "b"}
    assert torch.equal(back["a"], state["a"]) and torch.equal(back["b"], state["b"])
    with pytest.raises(CheckpointError):
        decode_params(b"garbage!" + bytes(8))


def test_checkpoint_round_trip(tmp_path, pretrained):
    h1 = pretrained.save(tmp_path / "ck")
    loaded = Checkpoint.load(tmp_path / "ck")
    h2 = loaded.save(tmp_path / "ck2")
    assert h1 == h2 == loaded.manifest_hash
    assert (tmp_path / "ck" / "seg.params").read_bytes() == (tmp_path / "ck2" / "seg.params").read_bytes()
    manifest = json.loads((tmp_path / "ck" / "manifest.json").read_text())
    assert manifest["version"] == 1 and len(manifest["loss_history"]) == 2
    assert not [p for p in tmp_path.iterdir() if p.name.startswith(".")]


def test_checkpoint_tamper_detected(tmp_path, pretrained):
    pretrained.save(tmp_path / "ck")
    blob = bytearray((tmp_path / "ck" / "seg.params").read_bytes())
    blob[-1] ^= 0xFF
    (tmp_path / "ck" / "seg.params").write_bytes(bytes(blob))
    with pytest.raises(CheckpointError):
        Checkpoint.load(tmp_path / "ck")


def test_failed_save_leaves_nothing(tmp_path, pretrained, monkeypatch):
    def boom(*a, **k):
        raise KeyboardInterrupt

    monkeypatch.setattr("pe_advseg.training.os.replace", boom)
    with pytest.raises(KeyboardInterrupt):
        pretrained.save(tmp_path / "ck")
    assert list(tmp_path.iterdir()) == []
