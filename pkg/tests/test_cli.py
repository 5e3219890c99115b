import json

import numpy as np
import pytest

from plateid import pipeline
from plateid.cli import build_parser, main
from plateid.config import parse_config

SMALL = """\
mesh.n_divisions = 16
sampler.chains = 2
sampler.chain_length = 120
sampler.burn_in = 20
"""

STAGE_FILES = {
    "data": {"mesh.txt", "displacement_clean.txt", "displacement.txt", "forces.txt",
             "segment_map_true.txt", "materials_true.txt", "manifest.txt"},
    "segment": {"mesh.txt", "displacement.txt", "segmentation.txt", "flagged.txt",
                "diagnostics.json", "manifest.txt"},
    "identify": {"posterior.txt", "draws.txt", "sampler.json", "manifest.txt"},
    "validate": {"r2_summary.txt", "comparison.json", "energy_segment1.csv", "energy_segment2.csv",
                 "manifest.txt"},
}


def _outputs(root):
    """Contents of every stage file except the manifests, keyed by relative path."""
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file() and p.name != "manifest.txt"}


@pytest.fixture(scope="module")
def small_cfg(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "small.cfg"
    path.write_text(SMALL)
    return path


@pytest.fixture(scope="module")
def run_dir(small_cfg, tmp_path_factory):
    out = tmp_path_factory.mktemp("run") / "a"
    assert main(["run-all", "--config", str(small_cfg), "--out", str(out)]) == 0
    return out


def test_run_all_writes_every_stage(run_dir):
    for stage, names in STAGE_FILES.items():
        assert {p.name for p in (run_dir / stage).iterdir()} == names


def test_manifest_records_config_and_seeds(run_dir):
    data = (run_dir / "data" / "manifest.txt").read_text().splitlines()
    assert "load.lambda_x = 1.6" in data and "load.lambda_y = 2.2" in data
    assert any(line.startswith("seed.noise = ") for line in data)
    ident = (run_dir / "identify" / "manifest.txt").read_text()
    assert "seed.subsample = " in ident and "seed.sampler = " in ident
    # the manifest is itself a valid configuration
    cfg = parse_config("\n".join(l for l in data if not l.startswith(("seed.", "#"))))
    assert cfg.n_divisions == 16 and cfg.chains == 2


def test_reruns_and_worker_count_are_bit_identical(run_dir, small_cfg, tmp_path):
    ref = _outputs(run_dir)
    assert main(["run-all", "--config", str(small_cfg), "--out", str(tmp_path / "b")]) == 0
    assert _outputs(tmp_path / "b") == ref
    cfg3 = tmp_path / "w.cfg"
    cfg3.write_text(SMALL + "sampler.workers = 2\n")
    assert main(["run-all", "--config", str(cfg3), "--out", str(tmp_path / "c")]) == 0
    assert _outputs(tmp_path / "c") == ref


def test_seed_changes_stochastic_outputs(run_dir, small_cfg, tmp_path):
    out = tmp_path / "d"
    assert main(["run-all", "--config", str(small_cfg), "--out", str(out), "--seed", "9"]) == 0
    a, b = _outputs(run_dir), _outputs(out)
    assert a["data/displacement.txt"] == b["data/displacement.txt"]  # noise-free data
    assert a["identify/draws.txt"] != b["identify/draws.txt"]


def test_validate_summary_and_comparison(run_dir):
    rows = [l.split() for l in (run_dir / "validate" / "r2_summary.txt").read_text().splitlines()[1:]]
    assert len(rows) == 12
    assert {r[2] for r in rows} == {"UT", "UC", "SS", "BT", "BC", "PS"}
    assert all(np.isfinite(float(r[3])) for r in rows)
    report = json.loads((run_dir / "validate" / "comparison.json").read_text())
    assert len(report["segments"]) == 2
    diag = json.loads((run_dir / "segment" / "diagnostics.json").read_text())
    assert diag["n_segments"] == 2 and not diag["nominally_homogeneous"]


def test_homogeneous_scenario_yields_one_segment(tmp_path):
    cfg = tmp_path / "h.cfg"
    cfg.write_text("scenario.name = homogeneous\nmesh.n_divisions = 10\n")
    out = tmp_path / "h"
    assert main(["generate", "--config", str(cfg), "--out", str(out)]) == 0
    assert main(["segment", "--config", str(cfg), "--out", str(out)]) == 0
    diag = json.loads((out / "segment" / "diagnostics.json").read_text())
    assert diag["nominally_homogeneous"] and diag["n_segments"] == 1
    assert (out / "segment" / "flagged.txt").read_text() == ""
    labels = np.loadtxt(out / "segment" / "segmentation.txt", dtype=int)[:, 1]
    assert np.all(labels == 1)


def test_configuration_errors_exit_2(tmp_path, capsys):
    assert main(["generate", "--out", str(tmp_path), "--frac-free", "0.5"]) == 2
    err = capsys.readouterr().err
    assert "identify.frac_free" in err and "[0.02, 0.1]" in err
    assert main(["generate", "--config", str(tmp_path / "none.cfg")]) == 2
    bad = tmp_path / "bad.cfg"
    bad.write_text("mesh.colour = red\n")
    assert main(["generate", "--config", str(bad)]) == 2
    assert "unknown key 'mesh.colour'" in capsys.readouterr().err


@pytest.mark.parametrize("stage, present, needed", [
    ("segment", [], "generate"),
    ("identify", ["data"], "segment"),
    ("validate", ["data", "segment"], "identify"),
])
def test_missing_upstream_stage_exits_2(stage, present, needed, small_cfg, run_dir, tmp_path, capsys):
    out = tmp_path / "partial"
    for name in present:
        (out / name).mkdir(parents=True)
        for f in (run_dir / name).iterdir():
            (out / name / f.name).write_bytes(f.read_bytes())
    assert main([stage, "--config", str(small_cfg), "--out", str(out)]) == 2
    assert needed in capsys.readouterr().err


def test_segmentation_failure_exits_4(small_cfg, run_dir, capsys):
    assert main(["segment", "--config", str(small_cfg), "--out", str(run_dir), "--lambda-flag", "1e-6"]) == 4
    assert "lambda" in capsys.readouterr().err
    # restore the stage for the other tests
    assert main(["segment", "--config", str(small_cfg), "--out", str(run_dir)]) == 0


def test_numerical_failure_exits_3(tmp_path, capsys):
    cfg = tmp_path / "n.cfg"
    cfg.write_text("mesh.n_divisions = 6\nload.lambda_x = 0.001\nload.n_steps = 1\n")
    assert main(["generate", "--config", str(cfg), "--out", str(tmp_path / "n")]) == 3
    assert "numerical failure" in capsys.readouterr().err


def test_parser_requires_a_stage():
    with pytest.raises(SystemExit) as exc:
        build_parser().parse_args([])
    assert exc.value.code == 2
    args = build_parser().parse_args(["-v", "identify", "--chains", "4", "--burn-in", "10"])
    assert args.command == "identify" and args.chains == 4 and args.burn_in == 10


def test_stage_seed_labels_are_disjoint_per_purpose():
    labels = [lab for labs in pipeline.STAGE_SEEDS.values() for lab in labs]
    assert set(labels) == {"noise", "denoise", "segment", "subsample", "sampler"}
