"""File-mediated pipeline stages behind the command-line interface.

Every stage reads its inputs from and writes its outputs to the run
directory ``cfg.out``::

    data/       forward mesh, clean and noisy displacements, forces,
                true segment map and material coefficients
    segment/    inversion mesh, displacements used, segmentation,
                flagged nodes and residual diagnostics
    identify/   posterior summary, all retained draws, sampler report
    validate/   energy-path tables, R^2 summary, OLS versus Bayes report

Each stage directory holds a ``manifest.txt`` with the full configuration
and the seeds derived for that stage, enough to re-run it bit-identically.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .assembly import assemble_system, read_forces, subsample, write_forces
from .config import derive_seed
from .constitutive import DEFAULT_LIBRARY, read_material_params, write_material_params
from .errors import ConfigurationError, FormatError, NumericalFailureError, SegmentationError
from .mesh import (
    generate_pattern,
    generate_plate_mesh,
    interpolate_to_mesh,
    read_displacements,
    read_mesh,
    read_segment_map,
    recover_transverse,
    write_displacements,
    write_mesh,
    write_segment_map,
)
from .sampler import SpikeSlabConfig, gibbs_run, read_draws, write_draws, write_posterior
from .segmentation import (
    SegmentationResult,
    flag_nodes,
    grow_segments,
    misassignment_fraction,
    noise_diagnostics,
    read_flagged,
    read_segmentation,
    residual_forces,
    write_diagnostics,
    write_flagged,
    write_segmentation,
)
from .synthdata import LoadProgram, NoiseSpec, add_noise, denoise_krr, forward_solve
from .validation import (
    PATH_KINDS,
    DeformationPath,
    compare_ols_bayes,
    energy_along_path,
    r_squared,
    write_comparison,
    write_energy_csv,
)

__all__ = ["cmd_generate", "cmd_segment", "cmd_identify", "cmd_validate", "run_all", "STAGE_SEEDS"]

log = logging.getLogger(__name__)

# labelled random streams consumed by each stage
STAGE_SEEDS = {
    "data": ("noise",),
    "segment": ("denoise", "segment"),
    "identify": ("subsample", "sampler"),
    "validate": ("subsample",),
}


def _dir(cfg, stage):
    d = Path(cfg.out) / stage
    d.mkdir(parents=True, exist_ok=True)
    return d


def _write_manifest(cfg, stage, extra=()):
    lines = [f"# stage {stage}"] + cfg.to_lines()
    lines += [f"seed.{label} = {derive_seed(cfg.seed, label)}" for label in STAGE_SEEDS[stage]]
    lines += list(extra)
    (_dir(cfg, stage) / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _require(path, stage):
    if not Path(path).is_file():
        raise FormatError(f"{path} not found; run the '{stage}' stage first")
    return Path(path)


def _inverse_mesh(cfg, forward_mesh):
    n = cfg.inverse_divisions
    if n == 0 or n == cfg.n_divisions:
        return forward_mesh, True
    return generate_plate_mesh(cfg.side, cfg.thickness, n), False


def _true_labels_on(mesh, data_mesh, true_map):
    """True segment of every element of ``mesh`` by nearest forward centroid."""
    if mesh.n_elements == data_mesh.n_elements and np.array_equal(mesh.elements, data_mesh.elements):
        return true_map.element_segment
    _, idx = cKDTree(data_mesh.centroids).query(mesh.centroids)
    return true_map.element_segment[idx]


# ---------------------------------------------------------------------------
# stages

def cmd_generate(cfg):
    """Forward solve and noise; writes ``data/``."""
    d = _dir(cfg, "data")
    mesh = generate_plate_mesh(cfg.side, cfg.thickness, cfg.n_divisions)
    segmap = generate_pattern(mesh, cfg.pattern)
    if segmap.n_c != len(cfg.materials):
        raise ConfigurationError(
            f"pattern.name {cfg.pattern!r} has {segmap.n_c} segments but {len(cfg.materials)} material.<id> entries"
        )
    load = LoadProgram(cfg.lambda_x, cfg.lambda_y, cfg.n_steps)
    try:
        res = forward_solve(mesh, segmap, cfg.materials, load)
    except NumericalFailureError as exc:
        raise type(exc)(f"scenario {cfg.scenario!r}: {exc}") from exc
    noisy = add_noise(res.field, NoiseSpec(cfg.sigma_u, derive_seed(cfg.seed, "noise")))
    write_mesh(mesh, d / "mesh.txt")
    write_displacements(res.field, d / "displacement_clean.txt")
    write_displacements(noisy, d / "displacement.txt")
    write_forces(res.forces, d / "forces.txt")
    write_segment_map(segmap, d / "segment_map_true.txt")
    write_material_params(cfg.materials, d / "materials_true.txt")
    _write_manifest(cfg, "data", [f"# forward residual {float(res.residual_norm)!r} tolerance {float(res.tolerance)!r}"])
    log.info("generate: %d elements, residual %.3e", mesh.n_elements, res.residual_norm)
    return res


def _load_data(cfg):
    d = Path(cfg.out) / "data"
    mesh = read_mesh(_require(d / "mesh.txt", "generate"))
    field = read_displacements(_require(d / "displacement.txt", "generate"), mesh)
    forces = read_forces(_require(d / "forces.txt", "generate"))
    true_map = read_segment_map(_require(d / "segment_map_true.txt", "generate"), mesh.n_elements)
    return mesh, field, forces, true_map


def cmd_segment(cfg):
    """Denoise, transfer to the inversion mesh and segment; writes ``segment/``."""
    d = _dir(cfg, "segment")
    data_mesh, field, forces, true_map = _load_data(cfg)
    if cfg.sigma_u > 0:
        field = denoise_krr(field, data_mesh, n_random_trials=cfg.denoise_trials,
                            seed=derive_seed(cfg.seed, "denoise"), noise_std=cfg.sigma_u)
    mesh, native = _inverse_mesh(cfg, data_mesh)
    if not native:
        field = interpolate_to_mesh(data_mesh, recover_transverse(data_mesh, field), mesh)

    lambda_r = cfg.lambda_r or None
    res = residual_forces(mesh, field, forces, lambda_r)
    ratio_mu, ratio_r, homogeneous = noise_diagnostics(res, forces)
    if homogeneous:
        result = SegmentationResult(
            flagged_nodes=np.zeros(0, dtype=np.int64),
            segments=[np.arange(mesh.n_elements)],
            unassigned=np.zeros(0, dtype=np.int64),
            element_segment=np.ones(mesh.n_elements, dtype=np.int64),
            lambda_threshold=cfg.lambda_flag,
        )
    else:
        flagged = flag_nodes(res, cfg.lambda_flag)
        try:
            result = grow_segments(mesh, flagged, derive_seed(cfg.seed, "segment"), cfg.min_segment_size)
        except SegmentationError as exc:
            raise SegmentationError(f"{exc} (segment.lambda_flag = {cfg.lambda_flag}; try a larger value)") from exc

    true_labels = _true_labels_on(mesh, data_mesh, true_map)
    diag = {
        "mu_over_sigma": ratio_mu,
        "sigma_over_Rmax": ratio_r,
        "nominally_homogeneous": homogeneous,
        "mu": res.mu,
        "sigma": res.sigma,
        "lambda_flag": cfg.lambda_flag,
        "n_flagged": int(len(result.flagged_nodes)),
        "n_segments": int(result.element_segment.max()),
        "n_unassigned_before_attachment": int(len(result.unassigned)),
        "misassignment_vs_truth": float(misassignment_fraction(true_labels, result.element_segment)),
        "native_mesh": native,
    }
    write_mesh(mesh, d / "mesh.txt")
    write_displacements(field, d / "displacement.txt")
    write_segmentation(result, d / "segmentation.txt")
    write_flagged(result.flagged_nodes, d / "flagged.txt")
    write_diagnostics(diag, d / "diagnostics.json")
    _write_manifest(cfg, "segment")
    log.info("segment: %d segments, mu/sigma %.3f", diag["n_segments"], ratio_mu)
    return result, diag


def _load_segment(cfg):
    d = Path(cfg.out) / "segment"
    mesh = read_mesh(_require(d / "mesh.txt", "segment"))
    field = read_displacements(_require(d / "displacement.txt", "segment"), mesh)
    segmap = read_segmentation(_require(d / "segmentation.txt", "segment"), mesh.n_elements)
    flagged = read_flagged(_require(d / "flagged.txt", "segment"))
    result = SegmentationResult(
        flagged_nodes=flagged,
        segments=[segmap.elements_of(s) for s in range(1, segmap.n_c + 1)],
        unassigned=np.zeros(0, dtype=np.int64),
        element_segment=segmap.element_segment,
    )
    return mesh, field, segmap, result


def _reduced_system(cfg):
    mesh, field, segmap, result = _load_segment(cfg)
    forces = read_forces(_require(Path(cfg.out) / "data" / "forces.txt", "generate"))
    system = assemble_system(mesh, field, segmap, forces, DEFAULT_LIBRARY, cfg.lambda_r or None)
    sub = subsample(system, result, mesh, cfg.frac_free, cfg.frac_flag, derive_seed(cfg.seed, "subsample"))
    return sub


def _sampler_config(cfg):
    return SpikeSlabConfig(
        a_sigma=cfg.a_sigma, b_sigma=cfg.b_sigma, a_nu=cfg.a_nu, b_nu=cfg.b_nu, a_p=cfg.a_p, b_p=cfg.b_p,
        n_chains=cfg.chains, chain_length=cfg.chain_length, burn_in=cfg.burn_in,
        seed=derive_seed(cfg.seed, "sampler"), n_workers=cfg.workers,
    )


def cmd_identify(cfg):
    """Assemble, sub-sample and sample the posterior; writes ``identify/``."""
    d = _dir(cfg, "identify")
    sub = _reduced_system(cfg)
    ens = gibbs_run(sub, _sampler_config(cfg))
    rhat = ens.rhat()
    if not np.all(np.isfinite(ens.draws)):
        raise NumericalFailureError(f"non-finite posterior draws (max R-hat {np.nanmax(rhat):.3g})")
    write_posterior(ens, d / "posterior.txt")
    write_draws(ens, d / "draws.txt")
    report = {
        "n_rows": int(sub.n_rows),
        "n_segments": int(sub.n_c),
        "lambda_r": float(sub.lambda_r),
        "kept_free_nodes": int(len(sub.meta["kept_free_nodes"])),
        "kept_flagged_nodes": int(len(sub.meta["kept_flagged_nodes"])),
        "rhat": [float(v) for v in rhat],
        "max_rhat": float(np.max(rhat)),
    }
    (d / "sampler.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _write_manifest(cfg, "identify")
    log.info("identify: %d rows, max R-hat %.3f", sub.n_rows, report["max_rhat"])
    return ens


def _match_segments(true_labels, pred_labels):
    """Predicted segment -> true material id by largest element overlap."""
    out = {}
    for s in np.unique(pred_labels):
        out[int(s)] = int(np.bincount(true_labels[pred_labels == s]).argmax())
    return out


def cmd_validate(cfg):
    """Energy paths, R^2 and the OLS versus Bayes report; writes ``validate/``."""
    d = _dir(cfg, "validate")
    ens = read_draws(Path(cfg.out) / "identify" / "draws.txt")
    data_dir = Path(cfg.out) / "data"
    truth = read_material_params(_require(data_dir / "materials_true.txt", "generate"))
    data_mesh = read_mesh(_require(data_dir / "mesh.txt", "generate"))
    true_map = read_segment_map(_require(data_dir / "segment_map_true.txt", "generate"), data_mesh.n_elements)
    mesh, _, segmap, _ = _load_segment(cfg)
    if segmap.n_c != ens.n_c:
        raise FormatError("posterior and segmentation disagree on the number of segments; re-run 'identify'")
    match = _match_segments(_true_labels_on(mesh, data_mesh, true_map), segmap.element_segment)

    summary = ["segment material path R2 band_width"]
    r2 = {}
    for s in range(1, ens.n_c + 1):
        theta_true = truth[match[s]]
        draws = ens.segment_draws(s)
        rows = []
        for kind in PATH_KINDS:
            path = DeformationPath(kind)
            band = energy_along_path(path, draws)
            w_true = energy_along_path(path, theta_true).median
            score = r_squared(w_true, band.median)
            width = float(np.mean(band.hi - band.lo))
            r2[(s, kind)] = score
            rows.append((kind, band, w_true))
            summary.append(f"{s} {match[s]} {kind} {score!r} {width!r}")
        write_energy_csv(rows, d / f"energy_segment{s}.csv")
    (d / "r2_summary.txt").write_text("\n".join(summary) + "\n", encoding="utf-8")

    report = compare_ols_bayes(_reduced_system(cfg), ens)
    report["matched_material"] = {str(k): v for k, v in match.items()}
    report["min_r2"] = float(min(r2.values()))
    write_comparison(report, d / "comparison.json")
    _write_manifest(cfg, "validate")
    return r2, report


def run_all(cfg):
    cmd_generate(cfg)
    cmd_segment(cfg)
    cmd_identify(cfg)
    return cmd_validate(cfg)
