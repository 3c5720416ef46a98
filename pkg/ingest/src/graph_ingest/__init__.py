"""Dataset ingestion: public graph benchmarks to the canonical directory
format (meta.json, features.csv, labels.csv, edges.csv, manifest.json)."""

from .ingest import (DATASETS, IngestError, IngestManifest, ingest,
                     make_synthetic)

__all__ = ["DATASETS", "IngestError", "IngestManifest", "ingest",
           "make_synthetic"]
