from __future__ import annotations

import datetime as dt
import os
from pathlib import Path

import peewee as pw
from dotenv import load_dotenv

from evi_melody import active
from evi_melody.config import CACHE_DB_VARNAME, Criterion

load_dotenv()
CACHE_DB_FILENAME = "curve_cache.db"

# Deferred; bound to a file by `init_cache`
cache_db = pw.SqliteDatabase(None)


class BaseModel(pw.Model):
    class Meta:
        database = cache_db


class CurveCellEntry(BaseModel):
    """One finished (criterion, budget, seed) cell of an adaptation curve run."""

    cell_id = pw.AutoField()
    config_digest = pw.CharField(max_length=64)
    criterion = pw.CharField()
    budget = pw.IntegerField()
    seed = pw.IntegerField()
    rpa = pw.FloatField()
    rca = pw.FloatField()
    oa = pw.FloatField()
    added_on = pw.DateTimeField(default=dt.datetime.now)

    class Meta:
        indexes = ((("config_digest", "criterion", "budget", "seed"), True),)

    @classmethod
    def from_curve_point(cls, digest: str, point: active.CurvePoint) -> CurveCellEntry:
        """
        Build an unsaved model instance from the provided `CurvePoint`.

        NOTE: Because this model is unsaved, it must be inserted with `.save()`.
        """
        return cls(
            config_digest=digest,
            criterion=point.criterion.value,
            budget=point.budget,
            seed=point.seed,
            rpa=point.rpa,
            rca=point.rca,
            oa=point.oa,
        )

    def to_curve_point(self) -> active.CurvePoint:  # noqa: D102
        return active.CurvePoint(
            criterion=Criterion(self.criterion),
            budget=self.budget,
            seed=self.seed,
            rpa=self.rpa,
            rca=self.rca,
            oa=self.oa,
        )


def cache_path(out_dir: Path) -> Path:
    """Cache location from the environment, falling back to a file in `out_dir`."""
    return Path(os.environ.get(CACHE_DB_VARNAME, out_dir / CACHE_DB_FILENAME))


def init_cache(db_path: Path) -> None:
    """Bind the cache to `db_path`, creating the file & table if needed."""
    db_path.parent.mkdir(parents=True, exist_ok=True)
    cache_db.init(str(db_path))
    cache_db.connect(reuse_if_open=True)
    create_tables()


def create_tables() -> None:  # noqa: D103
    CurveCellEntry.create_table(safe=True)


def get_cell(
    digest: str, criterion: Criterion, budget: int, seed: int
) -> active.CurvePoint | None:
    """Return the cached cell for this run configuration, if present."""
    entry = CurveCellEntry.get_or_none(
        (CurveCellEntry.config_digest == digest)
        & (CurveCellEntry.criterion == criterion.value)
        & (CurveCellEntry.budget == budget)
        & (CurveCellEntry.seed == seed)
    )
    return None if entry is None else entry.to_curve_point()


def insert_cell(digest: str, point: active.CurvePoint) -> None:
    """
    Insert a finished curve cell.

    NOTE: Row insertion is aborted if an integrity error is encountered, i.e. if the cell already
    exists for this config digest.
    """
    entry = CurveCellEntry.from_curve_point(digest, point)

    try:
        entry.save()
    except pw.IntegrityError:
        print(
            "Insertion aborted due to an integrity error. "
            f"A cell for {point.criterion.value}, N={point.budget}, seed {point.seed} already "
            "exists in the cache."
        )


def clear_cells(digest: str | None = None) -> int:
    """Delete the cached cells of one config digest, or every cell; returns the row count."""
    query = CurveCellEntry.delete()
    if digest is not None:
        query = query.where(CurveCellEntry.config_digest == digest)

    return int(query.execute())
