# -*- coding: utf-8 -*-
import csv
import io
import json
import logging
import os
from typing import Any, Dict, Iterable, List, Sequence

from app.domain.models import ROUND_CSV_FIELDS, RoundRecord

log = logging.getLogger("results_repo")


class ResultsRepository:
    """
    File-based result store for one output directory.

    Run files:    rounds.csv, plot.csv, stages.json, summary.json
    Sweep files:  sweep.csv, sweep.json
    Lemma check:  lemma.json

    Every file is written atomically (tmp + os.replace). JSON keys are sorted and
    nothing time-dependent is written, so identical runs produce identical bytes.
    """

    def __init__(self, out_dir: str):
        self.out_dir = out_dir
        os.makedirs(self.out_dir, exist_ok=True)

    def path(self, name: str) -> str:
        return os.path.join(self.out_dir, name)

    def _atomic_write(self, name: str, text: str) -> str:
        path = self.path(name)
        tmp_path = path + ".tmp"
        with open(tmp_path, "w", encoding="utf-8", newline="") as f:
            f.write(text)
        os.replace(tmp_path, path)
        log.debug("Wrote %s (%d bytes)", path, len(text))
        return path

    def write_csv(self, name: str, fields: Sequence[str], rows: Iterable[Dict[str, Any]]) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=list(fields), extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
        return self._atomic_write(name, buf.getvalue())

    def write_json(self, name: str, data: Any) -> str:
        text = json.dumps(data, ensure_ascii=False, indent=2, sort_keys=True, allow_nan=True)
        return self._atomic_write(name, text + "\n")

    def read_json(self, name: str) -> Any:
        with open(self.path(name), "r", encoding="utf-8") as f:
            return json.load(f)

    def read_csv(self, name: str) -> List[Dict[str, str]]:
        with open(self.path(name), "r", encoding="utf-8", newline="") as f:
            return list(csv.DictReader(f))

    def save_run(
        self,
        records: Sequence[RoundRecord],
        plot_fields: Sequence[str],
        plot_rows: Sequence[Dict[str, Any]],
        summary: Dict[str, Any],
    ) -> List[str]:
        paths = [
            self.write_csv("rounds.csv", ROUND_CSV_FIELDS, (r.as_row() for r in records)),
            self.write_csv("plot.csv", plot_fields, plot_rows),
            self.write_json("stages.json", summary.get("stages", [])),
            self.write_json("summary.json", summary),
        ]
        log.info("Run results saved to %s", self.out_dir)
        return paths

    def save_sweep(self, fields: Sequence[str], rows: Sequence[Dict[str, Any]]) -> List[str]:
        paths = [
            self.write_csv("sweep.csv", fields, rows),
            self.write_json("sweep.json", [dict(row) for row in rows]),
        ]
        log.info("Sweep results saved to %s", self.out_dir)
        return paths

    def save_lemma(self, report: Dict[str, Any]) -> str:
        return self.write_json("lemma.json", report)
