"""Writing result bundles to disk.

All tables go through [`FileManager`][loftlab.util.FileManager]; every written file is hashed into
`manifest.json`. Tables without rows are not written.
"""

from ..util import FileManager, Logger
from .pipeline import CURVE_HEADERS, HEATMAP_HEADERS, LEDGER_SUMMARY_HEADERS, MOMENT_HEADERS, RESULT_HEADERS

LEDGER_HEADERS = ["protocol", "round", "worker", "bytes_up", "bytes_down", "peak_param_bytes"]
MANIFEST = "manifest.json"


def _tables(bundle):
    return [
        ("results.csv", RESULT_HEADERS, bundle.results),
        ("curves.csv", CURVE_HEADERS, bundle.curves),
        ("heatmap.csv", HEATMAP_HEADERS, bundle.heatmap),
        ("ledger.csv", LEDGER_HEADERS, bundle.ledger),
        ("ledger_summary.csv", LEDGER_SUMMARY_HEADERS, bundle.ledger_summary),
        ("moments.csv", MOMENT_HEADERS, bundle.moments),
        ("summary.csv", bundle.summary_headers, bundle.summary),
    ]


def emit_outputs(bundle, outdir):
    """Write a bundle and its manifest.

    Args:
        bundle (ResultBundle): What to write.
        outdir (str): Output directory, created when missing.

    Returns:
        (dict): The manifest, also written as `manifest.json`.
    """
    written = []
    with FileManager.working_directory(outdir):
        for filename, headers, rows in _tables(bundle):
            if rows and FileManager.save_csv(rows, filename, headers) is not None:
                written.append((filename, len(rows)))
        for filename, weights in bundle.weights.items():
            if FileManager.save_pickle(weights, filename) is not None:
                written.append((filename, None))
        for filename, history in bundle.snapshots.items():
            if history and FileManager.save_zarr(history, filename, config_hash=bundle.config_hash) is not None:
                written.append((filename, None))
        manifest = {
            "mode": bundle.mode,
            "config_hash": bundle.config_hash,
            "failures": bundle.failures,
            "artifacts": [{"file": filename, "rows": rows, "sha256": FileManager.sha256(filename),
                           "config_hash": bundle.config_hash}
                          for filename, rows in written],
        }
        FileManager.save_json(manifest, MANIFEST)
    Logger.info(f"Wrote {len(written)} artifacts to '{outdir}'")
    return manifest
