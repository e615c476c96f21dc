"""Batch commands: synthesize cases, register them, evaluate the estimates."""

import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from src.xcoreg.core import warp_volume
from src.xcoreg.density import appearance_from_labels
from src.xcoreg.engine import PIPELINES, CoRegResult
from src.xcoreg.errors import NonFiniteLossError
from src.xcoreg.evaluation import GroundTruth, gre, gwi, pairwise_dsc, warp_labels
from src.xcoreg.models import Binning, CoRegConfig, ReportRow, SynthSpec
from src.xcoreg.persistence import (
    Persistence,
    load_manifest,
    load_transform,
    load_volume,
    save_channels,
    save_table_csv,
    save_volume,
)
from src.xcoreg.phantom import make_case
from src.xcoreg.reporter import generate_pdf_report, upsert_report, write_trace
from src.xcoreg.transforms import ChainTransform, Transform, identity_like

logger = logging.getLogger(__name__)


def cmd_synth(spec_path: str, out_dir: str, seed: Optional[int] = None) -> str:
    """Generate one synthetic case and its manifest; returns the manifest path."""
    spec = SynthSpec.model_validate_json(Path(spec_path).read_text(encoding="utf-8"))
    if seed is not None:
        spec = spec.model_copy(
            update={
                "phantom": spec.phantom.model_copy(update={"seed": seed}),
                "misalignment": spec.misalignment.model_copy(update={"seed": seed}),
            }
        )
    case = make_case(spec)
    persistence = Persistence(out_dir)
    manifest_path = persistence.save_case(case, seed=spec.phantom.seed)
    logger.info(f"Synthesized case {spec.case_id} ({spec.protocol}) with {len(case.images)} images in {out_dir}")
    return manifest_path


def load_config(config_path: Optional[str]) -> CoRegConfig:
    if not config_path:
        return CoRegConfig()
    return CoRegConfig.model_validate_json(Path(config_path).read_text(encoding="utf-8"))


def _ground_truth_appearance(volumes, label_paths, root: Path, cfg: CoRegConfig):
    if len(label_paths) != len(volumes):
        raise FileNotFoundError("ground-truth appearance needs one label map per image")
    tables = []
    for volume, label_path in zip(volumes, label_paths):
        labels = np.rint(load_volume(root / label_path).data).astype(int)
        binning = Binning.from_values(volume.data, L=cfg.L, h=cfg.bandwidth)
        tables.append(appearance_from_labels(volume, labels, binning, K=max(cfg.K, int(labels.max()) + 1)))
    return tables


def cmd_register(
    manifest_path: str,
    config_path: Optional[str] = None,
    out_dir: Optional[str] = None,
    method: Optional[str] = None,
    seed: Optional[int] = None,
) -> str:
    """Run the configured pipeline on a manifest's volumes and write every run artifact."""
    manifest, root = load_manifest(manifest_path)
    cfg = load_config(config_path or (str(root / manifest.config_path) if manifest.config_path else None))
    overrides = {"rng_seed": manifest.seed if seed is None else seed}
    if method or manifest.method:
        overrides["metric"] = method or manifest.method
    cfg = CoRegConfig.model_validate({**cfg.model_dump(by_alias=True), **overrides})

    volumes = [load_volume(root / p) for p in manifest.volumes]
    appearance = None
    if cfg.metric == "xmetric-gt":
        appearance = _ground_truth_appearance(volumes, manifest.labels, root, cfg)

    run_dir = Path(out_dir) if out_dir else root / "runs" / cfg.metric
    persistence = Persistence(run_dir)
    logger.info(f"Registering case {manifest.case_id} with pipeline={cfg.pipeline}, metric={cfg.metric}")
    try:
        result = PIPELINES[cfg.pipeline](volumes, cfg, appearance=appearance)
    except NonFiniteLossError as e:
        if e.trace is not None:
            write_trace(e.trace, run_dir)
        logger.error(f"Registration of {manifest.case_id} aborted: {e}")
        raise

    _save_result(persistence, result, volumes, cfg, manifest.case_id)
    return str(run_dir)


def _save_result(persistence: Persistence, result: CoRegResult, volumes, cfg: CoRegConfig, case_id: str) -> None:
    meta = {
        "case_id": case_id,
        "method": cfg.metric,
        "pipeline": cfg.pipeline,
        "transform_kind": _kind(result.transforms.members[0]),
        "diagnostics": result.diagnostics,
        "config": cfg.model_dump(by_alias=True),
    }
    persistence.save_run(result.transforms.members, meta)
    write_trace(result.trace, persistence.base_path)
    if result.common_space is not None:
        save_channels(result.grid, result.common_space.gamma, persistence.base_path / "gamma.pvol", modality="gamma")
    for j, table in enumerate(result.appearance):
        save_table_csv(table, persistence.base_path / "appearance" / f"appearance_{j:02d}.csv")
    common = volumes[0].grid
    for j, (volume, t) in enumerate(zip(volumes, result.transforms.members)):
        warped = warp_volume(volume, t, grid=common)
        save_volume(warped, persistence.base_path / "warped" / f"warped_{j:02d}.pvol")


def _kind(t: Transform) -> str:
    return t.active.kind if isinstance(t, ChainTransform) else t.kind


def register_many(
    manifests: Sequence[str],
    config_path: Optional[str] = None,
    method: Optional[str] = None,
    seed: Optional[int] = None,
    jobs: int = 1,
) -> List[str]:
    """Register independent cases, in separate processes when ``jobs`` > 1."""
    if jobs <= 1 or len(manifests) == 1:
        return [cmd_register(m, config_path, None, method, seed) for m in manifests]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(cmd_register, m, config_path, None, method, seed) for m in manifests]
        return [f.result() for f in futures]


def cmd_evaluate(
    manifest_path: str,
    estimated_dir: Optional[str] = None,
    report_path: Optional[str] = None,
    pdf: bool = True,
) -> List[ReportRow]:
    """Score estimated transforms (identity when no run is given) and upsert them into the report CSV."""
    manifest, root = load_manifest(manifest_path)
    if not manifest.gt_transforms or not manifest.foreground:
        raise FileNotFoundError(f"manifest {manifest_path} has no ground truth to evaluate against")
    foreground = load_volume(root / manifest.foreground)
    grid = foreground.grid
    gt = GroundTruth(
        grid=grid,
        misalignments=[load_transform(root / p) for p in manifest.gt_transforms],
        foreground=foreground.data > 0.5,
        labels=[np.rint(load_volume(root / p).data).astype(int) for p in manifest.labels],
    )

    if estimated_dir:
        estimated, meta = Persistence(estimated_dir).load_run()
        method = str(meta.get("method", Path(estimated_dir).name))
        kind = str(meta.get("transform_kind", _kind(estimated[0])))
    else:
        estimated = [identity_like("translation", grid) for _ in gt.misalignments]
        method, kind = "initial", "identity"

    scores: Dict[str, float] = {"gwi": gwi(gt, estimated), "gre": gre(gt, estimated)}
    if manifest.dsc_label is not None and gt.labels:
        scores["dsc"] = pairwise_dsc(warp_labels(gt.labels, estimated, grid), label=manifest.dsc_label)

    rows = [
        ReportRow(case_id=manifest.case_id, metric_name=name, method=method, transform_kind=kind, value=value)
        for name, value in scores.items()
    ]
    report_file = Path(report_path) if report_path else root / "report.csv"
    report = upsert_report(report_file, rows)
    if pdf:
        generate_pdf_report(report, report_file.with_suffix(".pdf"))
    logger.info(
        f"Evaluated {manifest.case_id} [{method}]: "
        + ", ".join(f"{name}={value:.4f}" for name, value in scores.items())
    )
    return rows
