import hashlib
from dataclasses import replace

import numpy as np
import pytest
import torch
from PIL import Image
from torch.utils.flop_counter import FlopCounterMode

from oracles import analytic_parameter_count
from orsiseg.config import TrainConfig, default_paper_config, desk_config, desk_train_config
from orsiseg.data import DataError, Sample
from orsiseg.model import SegmentationModel, count_parameters
from orsiseg.runtime.budget import budget_audit, count_macs
from orsiseg.runtime.checkpoint import (
    CheckpointError,
    CheckpointMismatchError,
    build_model,
    make_checkpoint,
    read_checkpoint,
    save_checkpoint,
)
from orsiseg.runtime.infer import infer
from orsiseg.runtime.initialize import init_parameters, zero_flagged
from orsiseg.runtime.train import NonFiniteLossError, train
from orsiseg.loss import total_loss


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_init_deterministic_under_seed():
    a = init_parameters(desk_config(), seed=3).state_dict()
    b = init_parameters(desk_config(), seed=3).state_dict()
    c = init_parameters(desk_config(), seed=4).state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)
    assert any(not torch.equal(a[k], c[k]) for k in a)


def test_zero_flagged_projections_exactly_zero():
    model = init_parameters(desk_config(), seed=0)
    flagged = zero_flagged(model)
    assert len(flagged) > 0
    assert all(torch.count_nonzero(m.weight) == 0 for m in flagged)
    assert all(torch.count_nonzero(m.bias) == 0 for m in flagged if m.bias is not None)


def test_truncated_normal_linears():
    model = init_parameters(desk_config(), seed=0)
    for m in model.modules():
        if isinstance(m, torch.nn.Linear) and not getattr(m, "_zero_init", False):
            assert m.weight.abs().max() <= 0.04


@pytest.mark.parametrize("cfg_fn", [desk_config, default_paper_config], ids=["desk", "paper"])
def test_parameter_count_matches_analytic_oracle(cfg_fn, paper_model):
    cfg = cfg_fn()
    model = paper_model if cfg == default_paper_config() else SegmentationModel(cfg)
    expected = analytic_parameter_count(cfg)
    assert count_parameters(model.encoder) == expected["encoder"]
    assert count_parameters(model.decoder) == expected["decoder"]
    assert count_parameters(model.heads) == expected["heads"]
    assert count_parameters(model) == expected["total"]


def test_budget_report_totals():
    rep = budget_audit(desk_config(), (96, 96))
    assert rep.total_params == rep.encoder_params + rep.decoder_params + rep.head_params
    assert rep.flops_at_input == sum(rep.breakdown.values())
    assert "MAC" in rep.table() and '"conventions"' in rep.to_json()
    with pytest.raises(ValueError, match="divisible by 32"):
        budget_audit(desk_config(), (100, 100))


def test_doubling_input_quadruples_conv_macs():
    torch.manual_seed(0)
    model = SegmentationModel(desk_config())
    small = count_macs(model, torch.zeros(1, 3, 64, 64))
    large = count_macs(model, torch.zeros(1, 3, 128, 128))
    assert large["conv"] == 4 * small["conv"]


def test_mac_count_agrees_with_torch_flop_counter():
    torch.manual_seed(0)
    model = SegmentationModel(desk_config()).eval()
    x = torch.zeros(1, 3, 96, 96)
    macs = count_macs(model, x)
    with FlopCounterMode(display=False) as counter, torch.no_grad():
        model(x)
    assert counter.get_total_flops() == 2 * (macs["conv"] + macs["linear"] + macs["attention"])


def test_full_scale_budget(paper_model):
    rep = budget_audit(default_paper_config(), (352, 352), model=paper_model)
    assert abs(rep.total_params - 44.20e6) / 44.20e6 <= 0.15
    assert abs(rep.encoder_params - 38.89e6) / 38.89e6 <= 0.15
    assert abs(rep.flops_at_input - 32.51e9) / 32.51e9 <= 0.25


def test_lr_schedule_default():
    cfg = TrainConfig()
    assert [cfg.lr_at(e) for e in (1, 40, 41, 80, 81)] == pytest.approx([1e-4, 1e-4, 1e-5, 1e-5, 1e-6], rel=1e-12)


def test_checkpoint_round_trip_byte_identical(tmp_path):
    model = init_parameters(desk_config(), seed=1)
    opt = torch.optim.Adam(model.parameters(), lr=1e-3)
    model(torch.rand(1, 3, 64, 64)).p1.mean().backward()
    opt.step()
    first = save_checkpoint(tmp_path / "a.ckpt", make_checkpoint(model, desk_config(), TrainConfig(), 3, opt))
    loaded = read_checkpoint(first)
    second = save_checkpoint(tmp_path / "b.ckpt", loaded)
    assert first.read_bytes() == second.read_bytes()
    rebuilt = build_model(loaded)
    for (k, a), b in zip(model.state_dict().items(), rebuilt.state_dict().values()):
        assert torch.equal(a, b), k
    assert loaded.epoch == 3 and loaded.model_config == desk_config()


def test_checkpoint_errors(tmp_path):
    with pytest.raises(CheckpointError, match="not found"):
        read_checkpoint(tmp_path / "missing.ckpt")
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a zip")
    with pytest.raises(CheckpointError, match="malformed"):
        read_checkpoint(bad)


def test_checkpoint_with_foreign_arrays_is_a_mismatch(tmp_path):
    desk = init_parameters(desk_config(), seed=0)
    path = save_checkpoint(tmp_path / "x.ckpt", make_checkpoint(desk, default_paper_config(), TrainConfig(), 1))
    with pytest.raises(CheckpointMismatchError, match="config mismatch"):
        build_model(read_checkpoint(path))


def test_adam_zero_gradient_is_noop():
    model = init_parameters(desk_config(), seed=0)
    before = {k: v.clone() for k, v in model.state_dict().items()}
    opt = torch.optim.Adam(model.parameters(), lr=1e-3, weight_decay=0)
    for p in model.parameters():
        p.grad = torch.zeros_like(p)
    for _ in range(3):
        opt.step()
    assert all(torch.equal(before[k], v) for k, v in model.state_dict().items())


def test_gradients_reach_parameters_once_zero_init_unblocks():
    # zero-initialized residual outputs block upstream gradients on step one;
    # each step unblocks one more nesting level
    torch.manual_seed(0)
    model = init_parameters(desk_config(), seed=0)
    opt = torch.optim.Adam(model.parameters(), lr=1e-3)
    x = torch.rand(2, 3, 64, 64)
    gt = (torch.rand(2, 1, 64, 64) > 0.5).float()
    hidden = {}
    for name, mod in model.named_modules():
        if isinstance(mod, torch.nn.ReLU) and name.endswith("mlp.1"):
            mod.register_forward_hook(lambda m, i, o, key=name[: -len(".1")]: hidden.__setitem__(key, o.detach()))
    dead_counts = []
    for _ in range(3):
        opt.zero_grad()
        total_loss(model(x), gt).total.backward()
        opt.step()
        dead = [n for n, p in model.named_parameters() if p.grad is None or torch.count_nonzero(p.grad) == 0]
        dead_counts.append(len(dead))
    assert dead_counts[0] > dead_counts[1] > dead_counts[2]
    # anything still without gradient sits behind a channel-gate bottleneck
    # whose ReLU is inactive for every input in the batch
    for name in dead:
        prefix = name.rsplit(".", 2)[0]
        assert prefix in hidden, name
        assert torch.count_nonzero(hidden[prefix]) == 0, name


def test_train_writes_checkpoints_and_logs(desk_run):
    assert [p.name for p in desk_run.checkpoints] == ["epoch_001.ckpt", "epoch_002.ckpt"]
    rows = desk_run.log_path.read_text().splitlines()
    assert rows[0].startswith("epoch,iter,step,lr,loss,p1_bce,p1_iou")
    assert len(rows) == 1 + 2 * 4
    assert len(desk_run.breakdown_path.read_text().splitlines()) == 1 + 2 * 4 * 5
    assert all(np.isfinite(loss) for _, _, loss in desk_run.losses)


def _nan_sample(size=64):
    image = np.full((3, size, size), np.nan, dtype=np.float32)
    return Sample(image, np.zeros((1, size, size), np.float32), "nan")


def test_non_finite_input_aborts_naming_tensor(tmp_path):
    cfg = replace(desk_config(), input_size=(64, 64))
    with pytest.raises(NonFiniteLossError, match="input images") as exc:
        train(cfg, replace(desk_train_config(), epochs=1), [_nan_sample()], tmp_path, plot=False)
    assert exc.value.epoch == 1 and exc.value.iteration == 1


def test_non_finite_prediction_aborts_naming_level(tmp_path, monkeypatch):
    real_forward = SegmentationModel.forward

    def forward(self, image, return_state=False):
        preds = real_forward(self, image)
        return preds._replace(p3=preds.p3 * float("inf"))

    monkeypatch.setattr(SegmentationModel, "forward", forward)
    ok = Sample(np.full((3, 64, 64), 0.5, np.float32), np.ones((1, 64, 64), np.float32), "ok")
    cfg = replace(desk_config(), input_size=(64, 64))
    with pytest.raises(NonFiniteLossError, match="p3") as exc:
        train(cfg, replace(desk_train_config(), epochs=1), [ok], tmp_path, plot=False)
    assert exc.value.tensor_name == "p3"
    assert not list(tmp_path.glob("checkpoints/*"))


def test_non_finite_activation_aborts_naming_site(tmp_path, monkeypatch):
    import orsiseg.encoder as encoder_mod

    real = encoder_mod.PatchEmbed.forward
    monkeypatch.setattr(encoder_mod.PatchEmbed, "forward", lambda self, x: real(self, x) * float("nan"))
    ok = Sample(np.full((3, 64, 64), 0.5, np.float32), np.ones((1, 64, 64), np.float32), "ok")
    cfg = replace(desk_config(), input_size=(64, 64))
    with pytest.raises(NonFiniteLossError, match="spectral transform input"):
        train(cfg, replace(desk_train_config(), epochs=1), [ok], tmp_path, plot=False)


def test_resume_rejects_other_config(desk_run, tmp_path):
    with pytest.raises(CheckpointMismatchError):
        train(default_paper_config(), desk_train_config(), [None], tmp_path, resume=desk_run.checkpoints[0])


def test_infer_outputs_uint8_and_deterministic(desk_run, synth_root, tmp_path):
    images = sorted((synth_root / "train" / "images").iterdir())[:3]
    a = infer(desk_run.checkpoints[-1], images, tmp_path / "a")
    b = infer(desk_run.checkpoints[-1], images, tmp_path / "b")
    assert [p.name for p in a] == [p.name for p in images]
    for pa, pb in zip(a, b):
        assert pa.read_bytes() == pb.read_bytes()
        with Image.open(pa) as im:
            assert im.mode == "L" and im.size == (96, 96)
            arr = np.asarray(im)
        assert arr.dtype == np.uint8 and arr.min() >= 0 and arr.max() <= 255


def test_infer_resizes_back_to_source(desk_run, tmp_path):
    src = tmp_path / "odd.png"
    Image.fromarray(np.random.default_rng(0).integers(0, 256, (50, 70, 3), dtype=np.uint8)).save(src)
    (out,) = infer(desk_run.checkpoints[-1], src, tmp_path / "out")
    with Image.open(out) as im:
        assert im.size == (70, 50)


def test_infer_errors(desk_run, tmp_path):
    with pytest.raises(DataError, match="no such input"):
        infer(desk_run.checkpoints[-1], tmp_path / "nothing", tmp_path / "o")
    with pytest.raises(CheckpointMismatchError):
        infer(desk_run.checkpoints[-1], tmp_path, tmp_path / "o", model_cfg=default_paper_config())


def test_same_seed_same_checkpoint(desk_run, synth_root, tmp_path):
    from orsiseg.data import DatasetSpec, load_dataset

    ds = load_dataset(DatasetSpec(synth_root, "train", (96, 96)))
    again = train(desk_config(), replace(desk_train_config(), epochs=2), ds, tmp_path, plot=False)
    assert again.losses == desk_run.losses
    assert [sha(p) for p in again.checkpoints] == [sha(p) for p in desk_run.checkpoints]
