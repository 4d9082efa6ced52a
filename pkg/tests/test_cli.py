"""Command-line behavior: exit codes, artifacts, determinism, precedence.

A module-scoped pipeline (dataset -> contrastive towers -> denoiser) keeps
the cost of the command tests to one tiny training run each.
"""

import os

import numpy as np
import pytest

from voxdiff import cisp
from voxdiff import cli
from voxdiff import metrics as mx
from voxdiff import synthdata
from voxdiff import voxelgeom as vg
from voxdiff.cli import load_checkpoint

# cruciform arms at R=8 are thinner than one voxel, so the family is
# excluded; resolution stays divisible by 4 for the denoiser
DATASET_ARGS = ["--set", "count=48", "--set", "resolution=8",
                "--set", "image_resolution=16",
                "--set", "weights.box=1", "--set", "weights.table=1",
                "--set", "weights.sphere=1", "--set", "weights.cruciform=0"]

CISP_ARGS = ["--set", "epochs=2", "--set", "batch=8", "--set", "d=8",
             "--set", "image.h=16", "--set", "image.layers=1",
             "--set", "image.heads=2", "--set", "image.patch=4",
             "--set", "shape.h=16", "--set", "shape.layers=1",
             "--set", "shape.heads=2", "--set", "shape.patch=4"]

DDPM_ARGS = ["--set", "epochs=1", "--set", "batch=8", "--set", "steps=50",
             "--set", "c0=2", "--set", "c1=6", "--set", "c2=8",
             "--set", "temb=16", "--set", "sin_dim=8",
             "--set", "heads=2", "--set", "d=8",
             "--set", "ctx.h=16", "--set", "ctx_layers=1",
             "--set", "ctx.heads=2", "--set", "ctx.patch=4"]


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    ds = root / "ds"
    assert cli.main(["dataset", "--out", str(ds), "--seed", "7"] + DATASET_ARGS) == 0
    assert cli.main(["train-cisp", "--set", f"dataset={ds}", "--seed", "0",
                     "--out", str(root / "cisp")] + CISP_ARGS) == 0
    assert cli.main(["train-ddpm", "--set", f"dataset={ds}", "--seed", "0",
                     "--set", f"cisp_checkpoint={root / 'cisp' / 'cisp.ckp'}",
                     "--out", str(root / "ddpm")] + DDPM_ARGS) == 0
    return root


def first_image(work):
    images = sorted((work / "ds" / "images").iterdir())
    return str(images[0])


# --------------------------------------------------------------------------
# exit codes

def test_missing_required_key_exits_2(tmp_path, capsys):
    assert cli.main(["dataset", "--out", str(tmp_path / "d")]) == 2
    assert "missing required config key 'count'" in capsys.readouterr().err


def test_unknown_config_key_exits_2(tmp_path, capsys):
    rc = cli.main(["dataset", "--out", str(tmp_path / "d"),
                   "--set", "count=4", "--set", "resolutoin=8"])
    assert rc == 2
    assert "resolutoin" in capsys.readouterr().err


def test_unwritable_out_exits_3(work):
    rc = cli.main(["generate",
                   "--set", f"checkpoint={work / 'ddpm' / 'ddpm.ckp'}",
                   "--set", "unconditional=true", "--set", "steps=25",
                   "--out", "/dev/null/nope"])
    assert rc == 3


def test_missing_config_file_exits_3(tmp_path):
    assert cli.main(["dataset", "--config", str(tmp_path / "absent.cfg"),
                     "--out", str(tmp_path / "d")]) == 3


def test_corrupt_checkpoint_exits_3(work, tmp_path):
    blob = bytearray((work / "ddpm" / "ddpm.ckp").read_bytes())
    blob[len(blob) // 2] ^= 0x10
    bad = tmp_path / "bad.ckp"
    bad.write_bytes(bytes(blob))
    rc = cli.main(["generate", "--set", f"checkpoint={bad}",
                   "--set", "unconditional=true", "--out", str(tmp_path / "g")])
    assert rc == 3


def test_guidance_below_one_exits_2(work, tmp_path):
    rc = cli.main(["generate",
                   "--set", f"checkpoint={work / 'ddpm' / 'ddpm.ckp'}",
                   "--set", f"image={first_image(work)}",
                   "--set", "w=0.5", "--set", "steps=25",
                   "--out", str(tmp_path / "g")])
    assert rc == 2


def test_unknown_command_exits_2():
    with pytest.raises(SystemExit) as exc:
        cli.main(["frobnicate"])
    assert exc.value.code == 2


# --------------------------------------------------------------------------
# config precedence at the command level

def test_set_overrides_config_file(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("count=4\nresolution=8\nimage_resolution=16\n"
                   "weights.box=1\nweights.table=0\nweights.sphere=0\n"
                   "weights.cruciform=0\n", encoding="utf-8")
    out = tmp_path / "d"
    assert cli.main(["dataset", "--config", str(cfg), "--out", str(out),
                     "--set", "count=6"]) == 0
    ds = synthdata.load_dataset(out)
    assert len(ds) == 6


# --------------------------------------------------------------------------
# training artifacts

def test_train_cisp_run_is_byte_deterministic(work, tmp_path):
    ds = work / "ds"
    out2 = tmp_path / "again"
    assert cli.main(["train-cisp", "--set", f"dataset={ds}", "--seed", "0",
                     "--out", str(out2)] + CISP_ARGS) == 0
    ref = work / "cisp"
    assert (out2 / "cisp.ckp").read_bytes() == (ref / "cisp.ckp").read_bytes()
    assert (out2 / "cisp_loss.tsv").read_bytes() == (ref / "cisp_loss.tsv").read_bytes()


def test_loss_log_format(work):
    lines = (work / "cisp" / "cisp_loss.tsv").read_text().splitlines()
    assert len(lines) == 2
    for i, line in enumerate(lines):
        epoch, loss = line.split("\t")
        assert int(epoch) == i
        assert repr(float(loss)) == loss  # full-precision round-trip


def test_ddpm_checkpoint_carries_image_tower(work):
    tensors, echo = load_checkpoint(work / "ddpm" / "ddpm.ckp")
    assert any(k.startswith("cisp.img.") for k in tensors)
    assert any(k.startswith("opt.") for k in tensors)
    assert echo["embedding_source"] == "cisp"
    assert echo["cisp.image.d"] == "8"


def test_train_ddpm_requires_one_embedding_source(work, tmp_path, capsys):
    ds = work / "ds"
    rc = cli.main(["train-ddpm", "--set", f"dataset={ds}",
                   "--out", str(tmp_path / "d")] + DDPM_ARGS)
    assert rc == 2
    assert "exactly one embedding source" in capsys.readouterr().err


def test_resume_needs_more_epochs(work, tmp_path, capsys):
    ds = work / "ds"
    rc = cli.main(["train-cisp", "--set", f"dataset={ds}",
                   "--set", f"resume={work / 'cisp' / 'cisp.ckp'}",
                   "--set", "epochs=2", "--out", str(tmp_path / "r")] + CISP_ARGS[2:])
    assert rc == 2
    assert "needs epochs > 2" in capsys.readouterr().err


# --------------------------------------------------------------------------
# generation

def test_generate_writes_count_grids(work, tmp_path):
    out = tmp_path / "g"
    rc = cli.main(["generate", "--set", f"checkpoint={work / 'ddpm' / 'ddpm.ckp'}",
                   "--set", f"image={first_image(work)}",
                   "--set", "count=3", "--set", "steps=25",
                   "--seed", "5", "--out", str(out)])
    assert rc == 0
    occ = vg.load_cvx(out / "generated.cvx")
    assert occ.shape == (3, 8, 8, 8)
    meta = dict(line.split("=", 1)
                for line in (out / "generated.meta.txt").read_text().splitlines())
    assert meta["count"] == "3"
    assert meta["seed"] == "5"
    assert meta["steps"] == "25"
    assert meta["conditioning"] == first_image(work)


def test_generate_is_deterministic(work, tmp_path):
    args = ["generate", "--set", f"checkpoint={work / 'ddpm' / 'ddpm.ckp'}",
            "--set", f"image={first_image(work)}", "--set", "steps=25",
            "--seed", "9"]
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(args + ["--out", str(a)]) == 0
    assert cli.main(args + ["--out", str(b)]) == 0
    assert (a / "generated.cvx").read_bytes() == (b / "generated.cvx").read_bytes()


def test_generate_unconditional_ignores_image_with_warning(work, tmp_path, capsys):
    rc = cli.main(["generate", "--set", f"checkpoint={work / 'ddpm' / 'ddpm.ckp'}",
                   "--set", f"image={first_image(work)}",
                   "--set", "unconditional=true", "--set", "count=1",
                   "--set", "steps=25", "--out", str(tmp_path / "g")])
    assert rc == 0
    assert "ignoring image" in capsys.readouterr().err


def test_generate_needs_image_or_unconditional(work, tmp_path):
    rc = cli.main(["generate", "--set", f"checkpoint={work / 'ddpm' / 'ddpm.ckp'}",
                   "--set", "steps=25", "--out", str(tmp_path / "g")])
    assert rc == 2


def test_conditioned_generate_needs_a_tower(work, tmp_path):
    # a denoiser trained from raw embedding files carries no image tower
    ds = work / "ds"
    emb = tmp_path / "emb"
    assert cli.main(["embed", "--set", f"cisp_checkpoint={work / 'cisp' / 'cisp.ckp'}",
                     "--set", f"dataset={ds}", "--out", str(emb)]) == 0
    run = tmp_path / "ddpm_cemb"
    assert cli.main(["train-ddpm", "--set", f"dataset={ds}", "--seed", "0",
                     "--set", f"cemb={emb / 'images.cemb'}",
                     "--out", str(run)] + DDPM_ARGS) == 0
    tensors, echo = load_checkpoint(run / "ddpm.ckp")
    assert echo["embedding_source"] == "cemb"
    assert not any(k.startswith("cisp.") for k in tensors)
    rc = cli.main(["generate", "--set", f"checkpoint={run / 'ddpm.ckp'}",
                   "--set", f"image={first_image(work)}",
                   "--set", "steps=25", "--out", str(tmp_path / "g")])
    assert rc == 2


# --------------------------------------------------------------------------
# evaluation

def test_evaluate_identical_files_iou_one(work, tmp_path):
    gen = tmp_path / "g"
    assert cli.main(["generate", "--set", f"checkpoint={work / 'ddpm' / 'ddpm.ckp'}",
                     "--set", f"image={first_image(work)}",
                     "--set", "count=2", "--set", "steps=25",
                     "--out", str(gen)]) == 0
    out = tmp_path / "eval"
    rc = cli.main(["evaluate", "--set", f"generated={gen / 'generated.cvx'}",
                   "--set", f"reference={gen / 'generated.cvx'}",
                   "--set", "metrics=iou", "--out", str(out)])
    assert rc == 0
    reports = mx.read_reports(out / "reports.txt")
    assert len(reports) == 1
    assert reports[0].metric == "iou"
    assert reports[0].values["mean"] == 1.0


def test_evaluate_fscore_records_tau(work, tmp_path):
    gen = tmp_path / "g"
    assert cli.main(["generate", "--set", f"checkpoint={work / 'ddpm' / 'ddpm.ckp'}",
                     "--set", "unconditional=true", "--set", "count=2",
                     "--set", "steps=25", "--out", str(gen)]) == 0
    out = tmp_path / "eval"
    rc = cli.main(["evaluate", "--set", f"generated={gen / 'generated.cvx'}",
                   "--set", f"reference={gen / 'generated.cvx'}",
                   "--set", "metrics=fscore", "--set", "points=64",
                   "--out", str(out)])
    assert rc == 0
    reports = mx.read_reports(out / "reports.txt")
    assert reports[0].values["tau_d"] == 0.02


def test_evaluate_one_nna_unequal_counts_exits_2(work, tmp_path):
    g2, g3 = tmp_path / "g2", tmp_path / "g3"
    for out, n in ((g2, 2), (g3, 3)):
        assert cli.main(["generate",
                         "--set", f"checkpoint={work / 'ddpm' / 'ddpm.ckp'}",
                         "--set", "unconditional=true", "--set", f"count={n}",
                         "--set", "steps=25", "--out", str(out)]) == 0
    rc = cli.main(["evaluate", "--set", f"generated={g2 / 'generated.cvx'}",
                   "--set", f"reference={g3 / 'generated.cvx'}",
                   "--set", "metrics=1nna", "--set", "points=64",
                   "--out", str(tmp_path / "eval")])
    assert rc == 2


def test_evaluate_accepts_manifest_reference(work, tmp_path):
    ds = work / "ds"
    gen = tmp_path / "g"
    assert cli.main(["generate", "--set", f"checkpoint={work / 'ddpm' / 'ddpm.ckp'}",
                     "--set", "unconditional=true", "--set", "count=48",
                     "--set", "steps=25", "--out", str(gen)]) == 0
    out = tmp_path / "eval"
    rc = cli.main(["evaluate", "--set", f"generated={gen / 'generated.cvx'}",
                   "--set", f"reference={ds / 'manifest.tsv'}",
                   "--set", "reference_split=all",
                   "--set", "metrics=iou", "--out", str(out)])
    assert rc == 0
    reports = mx.read_reports(out / "reports.txt")
    assert 0.0 <= reports[0].values["mean"] <= 1.0


def test_evaluate_unknown_metric_exits_2(work, tmp_path, capsys):
    rc = cli.main(["evaluate", "--set", "generated=a.cvx",
                   "--set", "reference=b.cvx", "--set", "metrics=volume",
                   "--out", str(tmp_path / "eval")])
    assert rc == 2
    assert "unknown metrics" in capsys.readouterr().err


# --------------------------------------------------------------------------
# interpolation

def test_interpolate_writes_sweep(work, tmp_path):
    images = sorted((work / "ds" / "images").iterdir())
    out = tmp_path / "sweep"
    rc = cli.main(["interpolate",
                   "--set", f"ddpm_checkpoint={work / 'ddpm' / 'ddpm.ckp'}",
                   "--set", f"image_a={images[0]}",
                   "--set", f"image_b={images[1]}",
                   "--set", "steps=3", "--out", str(out)])
    assert rc == 0
    manifest = (out / "manifest.txt").read_text()
    assert "alphas=0.0,0.5,1.0" in manifest
    for name in ("alpha_0.0.cvx", "alpha_0.5.cvx", "alpha_1.0.cvx"):
        occ = vg.load_cvx(out / name)
        assert occ.shape == (1, 8, 8, 8)


# --------------------------------------------------------------------------
# retrieval table

def test_ablate_selftest_is_perfect(capsys):
    assert cli.main(["ablate", "--set", "selftest=true", "--set", "batch=16"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "Top-1\tTop-2\tTop-3\tTop-4\tTop-5"
    assert lines[1] == "\t".join(["1.0000"] * 5)


def test_ablate_on_trained_towers(work, tmp_path, capsys):
    out = tmp_path / "table.tsv"
    rc = cli.main(["ablate",
                   "--set", f"cisp_checkpoint={work / 'cisp' / 'cisp.ckp'}",
                   "--set", f"dataset={work / 'ds'}", "--set", "split=all",
                   "--set", "batch=16", "--set", "trials=2",
                   "--set", f"out={out}"])
    assert rc == 0
    header, row = out.read_text().splitlines()
    vals = [float(v) for v in row.split("\t")]
    assert len(vals) == 5
    assert all(0.0 <= v <= 1.0 for v in vals)
    assert vals == sorted(vals)  # top-k hit rate grows with k
    assert capsys.readouterr().out.splitlines()[0] == header


def test_ablate_split_smaller_than_batch_exits_2(work, tmp_path, capsys):
    rc = cli.main(["ablate",
                   "--set", f"cisp_checkpoint={work / 'cisp' / 'cisp.ckp'}",
                   "--set", f"dataset={work / 'ds'}", "--set", "split=test",
                   "--set", "batch=64"])
    assert rc == 2
    assert "fewer than batch" in capsys.readouterr().err


# --------------------------------------------------------------------------
# embedding export

def test_embed_writes_unit_rows(work, tmp_path):
    out = tmp_path / "emb"
    rc = cli.main(["embed",
                   "--set", f"cisp_checkpoint={work / 'cisp' / 'cisp.ckp'}",
                   "--set", f"dataset={work / 'ds'}", "--out", str(out)])
    assert rc == 0
    e_img = cisp.load_cemb(out / "images.cemb")
    e_shp = cisp.load_cemb(out / "shapes.cemb")
    assert e_img.shape == e_shp.shape == (48, 8)
    np.testing.assert_allclose(np.linalg.norm(e_img, axis=1), 1.0, atol=1e-3)
    np.testing.assert_allclose(np.linalg.norm(e_shp, axis=1), 1.0, atol=1e-3)
