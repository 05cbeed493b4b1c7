"""
Convert a text export (JSON sidecar plus one CSV per channel) into .psgr files.

    python -m scripts.convert_text_export exports/S001.json exports/S002.json --out data/ --canonical

Restricted clinical datasets are exported to this text layout with their own
tooling; this script is the hook that turns them into recordings the toolkit
reads.
"""
import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from src.data_loading import import_text_recording, write_manifest, write_recording
from src.errors import PsgMaeError
from src.utils.logging_utils import setup_logging

logger = logging.getLogger(__name__)


def convert(sidecars: Sequence[Path], out_dir: Path, canonical: bool = False) -> List[Path]:
    recordings, files = [], []
    for sidecar in sidecars:
        rec = import_text_recording(sidecar, canonical=canonical)
        name = f"{rec.subject_id}.psgr"
        write_recording(rec, out_dir / name)
        logger.info("Converted %s -> %s (%d epochs, %d channels)", sidecar, name, rec.n_epochs, rec.C)
        recordings.append(rec)
        files.append(name)
    write_manifest(out_dir, recordings, files, {"source": "text-export"})
    return [out_dir / name for name in files]


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = argparse.ArgumentParser(description="Convert text exports into .psgr recordings")
    parser.add_argument("sidecars", nargs="+", type=Path, help="JSON sidecar files")
    parser.add_argument("--out", type=Path, required=True, help="Output directory")
    parser.add_argument("--canonical", action="store_true",
                        help="Rename and reorder channels to the canonical montage")
    parser.add_argument("--log-level", default="INFO")
    args = parser.parse_args(argv)
    setup_logging(args.log_level)
    try:
        convert(args.sidecars, args.out, args.canonical)
    except PsgMaeError as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
