# src/pipeline.py
import os
from typing import List, Tuple

import numpy as np
import pandas as pd
import torch

from .checkpoint import load_checkpoint
from .config import RunConfig, cache_dir
from .data import (
    FrameArchive,
    assign_splits,
    build_index,
    format_timestamp,
    is_rainy,
    load_split,
    situation_stats,
    split_samples,
    split_situations,
    synth_advection_dataset,
)
from .errors import ConfigError, DataError
from .evalkit import MetricReport, evaluate, persistence_forecast, relative_change, report_summary
from .exporters import (
    ensure_dir,
    export_frame_png,
    export_frames,
    export_index_csv,
    export_json,
    export_relative_change,
    export_report,
    export_split_manifest,
)
from .figures import plot_advection, plot_branches, plot_coefficients, plot_mae_curve
from .phycell import term_utilization
from .phydnet import PhyDNet, advection_fields, decompose_branches, forecast
from .training import TrainResult, set_seed, train

PLOT_KINDS = ("branches", "advection", "mae-curve", "coefficients")


def _print_files(header: str, paths: List[str]) -> None:
    print(header)
    for path in paths:
        print(f" - {path}")


def cmd_gen_synth(config: RunConfig) -> str:
    data = config.data
    dataset = synth_advection_dataset(data)
    paths = export_frames(dataset.frames, dataset.timestamps, data.data_dir)

    index_df = pd.DataFrame(
        {
            "timestamp": [format_timestamp(t) for t in dataset.timestamps],
            "rainy": [is_rainy(f) for f in dataset.frames],
        }
    )
    index_csv = os.path.join(data.data_dir, "index.csv")
    synth_json = os.path.join(data.data_dir, "synth.json")
    export_index_csv(index_df, index_csv)
    export_json(dataset.metadata, synth_json)

    print(f"Generated {len(paths)} frames ({data.grid}x{data.grid}), {int(index_df['rainy'].sum())} rainy.")
    _print_files("Exports complete:", [data.data_dir, index_csv, synth_json])
    return data.data_dir


def cmd_index(config: RunConfig) -> str:
    """Rebuilds index.csv from the PNG frames on disk."""
    root = config.data.data_dir
    if not os.path.isdir(root):
        raise DataError(f"Data directory not found: {root}")
    index_csv = os.path.join(root, "index.csv")
    export_index_csv(build_index(root), index_csv)
    _print_files("Index rebuilt:", [index_csv])
    return index_csv


def cmd_split(config: RunConfig):
    data = config.data
    archive = FrameArchive(data.data_dir, cache_dir())
    situations = split_situations(archive.rainy_timestamps())
    split = assign_splits(situations, data.ratios, data.seed)
    paths = export_split_manifest(split, data.data_dir)

    stats = situation_stats(situations)
    train_n, val_n, test_n = split.counts
    print(
        f"{stats['count']} situations (median {stats['median_hours']:.1f} h, mean {stats['mean_hours']:.1f} h): "
        f"train={train_n}, validation={val_n}, test={test_n}"
    )
    _print_files("Exports complete:", paths)
    return split


def _load_samples(config: RunConfig, split_name: str, tau_in: int, tau_out: int,
                  delta_minutes: int) -> np.ndarray:
    archive = FrameArchive(config.data.data_dir, cache_dir())
    split = load_split(config.data.data_dir)
    samples = split_samples(split, split_name, tau_in, tau_out, delta_minutes)
    return archive.stack_samples(samples)


def cmd_train(config: RunConfig) -> TrainResult:
    set_seed(config.train.seed)
    m = config.model
    train_samples = _load_samples(config, "train", m.tau_in, m.tau_out, m.delta_minutes)
    val_samples = _load_samples(config, "validation", m.tau_in, m.tau_out, m.delta_minutes)

    model = PhyDNet(m).to(torch.device(config.train.device))
    result = train(model, train_samples, val_samples, config.train, config.train.out_dir)

    final = result.final
    print(
        f"Trained {m.variant} (k={m.k}) for {config.train.epochs} epochs: "
        f"total={final['total']:.5f}, image={final['image_loss']:.5f}"
    )
    _print_files("Exports complete:", [result.checkpoint_path, os.path.join(config.train.out_dir, "history.csv")])
    return result


def _lead_times(config: RunConfig, model_tau_out: int) -> int:
    return config.eval.lead_times or model_tau_out


def cmd_eval(config: RunConfig, checkpoint: str) -> MetricReport:
    model, model_config, _ = load_checkpoint(checkpoint)
    leads = _lead_times(config, model_config.tau_out)
    samples = _load_samples(config, config.eval.split, model_config.tau_in, leads, model_config.delta_minutes)

    report = evaluate(model, samples, model_config.tau_in, leads, config.eval.thresholds_dbz)
    title = f"{model_config.variant} (k={model_config.k}) on {config.eval.split}"
    paths = export_report(report, config.eval.out_dir, report_summary(report, title, model_config.delta_minutes))

    if config.eval.baseline == "persistence":
        baseline = evaluate(persistence_forecast, samples, model_config.tau_in, leads, config.eval.thresholds_dbz)
        rel_path = os.path.join(config.eval.out_dir, "relative_change.csv")
        export_relative_change(relative_change(report, baseline), rel_path)
        paths.append(rel_path)

    overall = report.overall
    print(f"Evaluated {report.samples} samples: MAE={overall['mae']:.5f}, MSE={overall['mse']:.5f}")
    _print_files("Exports complete:", paths)
    return report


def _sample(config: RunConfig, tau_in: int, tau_out: int, delta_minutes: int, index: int) -> np.ndarray:
    samples = _load_samples(config, config.eval.split, tau_in, tau_out, delta_minutes)
    if not 0 <= index < len(samples):
        raise DataError(f"Sample {index} out of range: the {config.eval.split} split has {len(samples)} samples")
    return samples[index]


def cmd_predict(config: RunConfig, checkpoint: str, sample: int = 0) -> List[str]:
    model, mc, _ = load_checkpoint(checkpoint)
    leads = _lead_times(config, mc.tau_out)
    frames = _sample(config, mc.tau_in, leads, mc.delta_minutes, sample)

    with torch.no_grad():
        inputs = torch.as_tensor(frames[None, :mc.tau_in], dtype=torch.float32)
        bundles = forecast(inputs, model, leads)

    out_dir = os.path.join(config.eval.out_dir, f"predict_{sample:04d}")
    ensure_dir(out_dir)
    paths = []
    for i, bundle in enumerate(bundles, start=1):
        path = os.path.join(out_dir, f"pred_{i:02d}.png")
        export_frame_png(bundle.intensity[0, 0].numpy(), path)
        paths.append(path)
        if bundle.prob is not None:
            path = os.path.join(out_dir, f"prob_{i:02d}.png")
            export_frame_png(bundle.prob[0, 0].numpy(), path)
            paths.append(path)
    _print_files(f"Predicted {leads} frames for sample {sample}:", paths)
    return paths


def cmd_plot(config: RunConfig, checkpoint: str, kind: str, sample: int = 0) -> Tuple[str, ...]:
    if kind not in PLOT_KINDS:
        raise ConfigError(f"Plot kind must be one of {PLOT_KINDS}, got {kind!r}")
    model, mc, _ = load_checkpoint(checkpoint)
    if kind == "advection" and mc.variant != "advdiff":
        raise ConfigError("variant has no advection field")

    out_dir = config.eval.out_dir
    leads = _lead_times(config, mc.tau_out)
    paths: List[str] = []

    if kind == "coefficients":
        paths.append(plot_coefficients(term_utilization(model.phycell), os.path.join(out_dir, "coefficients.png")))

    elif kind == "mae-curve":
        samples = _load_samples(config, config.eval.split, mc.tau_in, leads, mc.delta_minutes)
        ours = evaluate(model, samples, mc.tau_in, leads, config.eval.thresholds_dbz)
        base = evaluate(persistence_forecast, samples, mc.tau_in, leads, config.eval.thresholds_dbz)
        curves = {
            mc.variant: ours.table["mae"].iloc[:-1].tolist(),
            "persistence": base.table["mae"].iloc[:-1].tolist(),
        }
        paths.append(plot_mae_curve(curves, os.path.join(out_dir, "mae_curve.png"), mc.delta_minutes))

    else:
        frames = _sample(config, mc.tau_in, leads, mc.delta_minutes, sample)
        inputs = torch.as_tensor(frames[None, :mc.tau_in], dtype=torch.float32)
        with torch.no_grad():
            if kind == "branches":
                parts = decompose_branches(inputs, model, leads)
                paths.append(
                    plot_branches(
                        [b.intensity[0, 0] for b in parts.combined],
                        [p[0, 0] for p in parts.physical],
                        [r[0, 0] for r in parts.residual],
                        os.path.join(out_dir, f"branches_{sample:04d}.png"),
                        truth=frames[mc.tau_in:],
                        delta_minutes=mc.delta_minutes,
                    )
                )
            else:
                fields = advection_fields(inputs, model, leads)
                branches = decompose_branches(inputs, model, leads)
                for i, field in enumerate(fields, start=1):
                    path = os.path.join(out_dir, f"advection_{sample:04d}_{i:02d}.png")
                    title = f"Advection field, +{i * mc.delta_minutes} min"
                    paths.append(
                        plot_advection(field, branches.physical[i - 1][0, 0], path, config.eval.arrow_stride, title)
                    )

    _print_files(f"Plotted {kind}:", paths)
    return tuple(paths)
