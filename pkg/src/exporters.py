# src/exporters.py
import json
import os
from typing import Dict, List, Sequence

import numpy as np
import pandas as pd
from PIL import Image

from .data import DatasetSplit, SPLIT_NAMES, format_timestamp, frame_filename, mldbz_to_dbz_byte


def ensure_dir(path: str) -> None:
    os.makedirs(path, exist_ok=True)


def export_frame_png(frame: np.ndarray, out_path: str) -> None:
    # 8-bit grayscale, 0..255 for 0..60 dBZ
    Image.fromarray(mldbz_to_dbz_byte(frame)).save(out_path)


def export_frames(frames: np.ndarray, timestamps: Sequence, out_dir: str) -> List[str]:
    ensure_dir(out_dir)
    paths = []
    for frame, ts in zip(frames, timestamps):
        path = os.path.join(out_dir, frame_filename(ts))
        export_frame_png(frame, path)
        paths.append(path)
    return paths


def export_index_csv(index_df: pd.DataFrame, out_path: str) -> None:
    index_df.to_csv(out_path, index=False)


def export_json(payload: Dict, out_path: str) -> None:
    with open(out_path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def split_manifest(split: DatasetSplit) -> pd.DataFrame:
    rows = []
    for name in SPLIT_NAMES:
        for situation in split.by_name(name):
            rows.append(
                {
                    "start": format_timestamp(situation.start),
                    "end": format_timestamp(situation.end),
                    "frames": len(situation),
                    "hours": round(situation.hours, 4),
                    "split": name,
                }
            )
    df = pd.DataFrame(rows, columns=["start", "end", "frames", "hours", "split"])
    df = df.sort_values("start", kind="stable").reset_index(drop=True)
    df.insert(0, "situation", range(len(df)))
    return df


def export_split_manifest(split: DatasetSplit, out_dir: str) -> List[str]:
    csv_path = os.path.join(out_dir, "split.csv")
    json_path = os.path.join(out_dir, "split.json")
    split_manifest(split).to_csv(csv_path, index=False)
    train, validation, test = split.counts
    export_json(
        {"seed": split.seed, "ratios": list(split.ratios), "counts": {"train": train, "validation": validation, "test": test}},
        json_path,
    )
    return [csv_path, json_path]


def write_history(history: pd.DataFrame, out_path: str) -> None:
    history.to_csv(out_path, index=False, float_format="%.8g")


def export_report(report, out_dir: str, summary: str) -> List[str]:
    ensure_dir(out_dir)
    csv_path = os.path.join(out_dir, "report.csv")
    txt_path = os.path.join(out_dir, "report.txt")
    report.table.to_csv(csv_path, float_format="%.8g")
    with open(txt_path, "w", encoding="utf-8") as fh:
        fh.write(summary)
    return [csv_path, txt_path]


def export_relative_change(table: pd.DataFrame, out_path: str) -> None:
    table.to_csv(out_path, float_format="%.8g")
