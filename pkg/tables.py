# tables.py
"""
Report tables computed with SQL over the per-trajectory and per-run CSVs,
executed in an in-memory DuckDB connection.
"""

import logging
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Dict, Iterator, List, Sequence, Tuple

import duckdb

from errors import AmpcError, MissingArtifact

logger = logging.getLogger(__name__)

COMPARISON_COLUMNS = ["policy", "perf", "p_t", "p_c", "eval_time", "violations"]

Table = Tuple[List[str], List[List[Any]]]


@contextmanager
def report_db() -> Iterator[duckdb.DuckDBPyConnection]:
    con = duckdb.connect(database=":memory:")
    # single-threaded aggregation keeps float sums reproducible
    con.execute("SET threads TO 1")
    try:
        yield con
    finally:
        con.close()


def query(con: duckdb.DuckDBPyConnection, sql: str) -> Table:
    """Run ``sql``; any DuckDB error becomes an ``AmpcError``."""
    try:
        cur = con.execute(sql)
        rows = cur.fetchall()
    except duckdb.Error as e:
        raise AmpcError(f"report query failed: {e}") from e
    columns = [c[0] for c in cur.description] if cur.description else []
    return columns, [list(r) for r in rows]


def _file_list(paths: Sequence[Path]) -> str:
    for p in paths:
        if not Path(p).exists():
            raise MissingArtifact(p)
    quoted = ", ".join("'" + str(p).replace("'", "''") + "'" for p in paths)
    return f"[{quoted}]"


def comparison_table(trajectory_csvs: Sequence[Path], eval_times: Dict[str, float]) -> Table:
    """
    One row per policy: mean p_t + p_c, mean p_t, mean p_c, median per-step
    evaluation time, and total violation count.
    """
    files = _file_list(trajectory_csvs)
    with report_db() as con:
        query(con, f"CREATE TABLE traj AS SELECT * FROM read_csv({files}, header = true, union_by_name = true)")
        query(con, "CREATE TABLE timing (policy VARCHAR, eval_time DOUBLE)")
        if eval_times:
            con.executemany("INSERT INTO timing VALUES (?, ?)", sorted(eval_times.items()))
        _, rows = query(con, """
            SELECT t.policy,
                   AVG(t.p_t + t.p_c)  AS perf,
                   AVG(t.p_t)          AS p_t,
                   AVG(t.p_c)          AS p_c,
                   ANY_VALUE(m.eval_time) AS eval_time,
                   SUM(t.violations)   AS violations
            FROM traj t LEFT JOIN timing m ON t.policy = m.policy
            GROUP BY t.policy
            ORDER BY t.policy
        """)
    logger.debug("comparison table over %d files: %d policies", len(trajectory_csvs), len(rows))
    return COMPARISON_COLUMNS, rows


def consistency_summary(runs_csv: Path) -> Table:
    """Seed-averaged distances per (method, interval, N_s)."""
    files = _file_list([runs_csv])
    with report_db() as con:
        return query(con, f"""
            SELECT method, a, b, N_s,
                   AVG("mean") AS mean_distance,
                   MAX(sup)    AS sup_distance,
                   COUNT(*)    AS seeds
            FROM read_csv({files}, header = true)
            GROUP BY method, a, b, N_s
            ORDER BY method, a, b, N_s
        """)
