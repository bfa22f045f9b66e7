from pathlib import Path

import dotenv
import typer

from evi_melody import db
from evi_melody.config import CACHE_DB_VARNAME, DEFAULT_OUT_DIR

dotenv.load_dotenv()

cache_cli = typer.Typer(add_completion=False)


@cache_cli.command()
def set_path(value: Path = typer.Argument(...)) -> None:
    """Save the curve cache database path to a local .env file."""
    local_dotenv = Path(dotenv.find_dotenv(usecwd=True))
    if not local_dotenv.is_file():
        local_dotenv = Path() / ".env"
        local_dotenv.write_text("")

    dotenv.set_key(local_dotenv, CACHE_DB_VARNAME, str(value))


@cache_cli.command()
def clear(
    out: Path = typer.Option(DEFAULT_OUT_DIR, file_okay=False, dir_okay=True),
    digest: str = typer.Option(None, help="Only drop the cells of this config digest."),
) -> None:
    """Drop cached adaptation curve cells."""
    db.init_cache(db.cache_path(out))
    n_removed = db.clear_cells(digest)
    print(f"Removed {n_removed} cached cell(s).")
