"""
Reporting - Shared text formatting for CLI output

Provides consistent plain-text output across all subcommands:
- StatusLabels: Text status indicators prefixed to messages
- eval_table: Method comparison table (mIoU as a percentage, mMse)
- trace_table / parameter_table: Network description for `describe`
- gradcheck_table: Per-target relative errors with pass/fail labels
- summary_block: Key facts of a run in a delimited block
"""

from collections.abc import Sequence
from typing import Any

from src.autograd.gradcheck import DEFAULT_TOLERANCE, GradCheckResult
from src.models import EvalReport
from src.smokenet import TraceRow

# =============================================================================
# STATUS LABELS
# =============================================================================


class StatusLabels:
    """Text status labels; parseable and safe on any terminal."""

    OK = "[OK]"  # Success
    WARN = "[WARN]"  # Warning condition
    ERR = "[ERR]"  # Error state
    FAIL = "[FAIL]"  # Check over tolerance
    SKIP = "[SKIP]"  # Record or file skipped

    CFG = "[CFG]"  # Resolved configuration
    STATS = "[STATS]"  # Aggregate numbers

    SMOKE = "[SMOKE]"  # Frame classified as smoke
    CLEAR = "[--]"  # Frame classified as non-smoke


SEPARATOR = "=" * 50


def summary_block(title: str, facts: dict[str, Any]) -> str:
    """
    Delimited block of key facts.

    Args:
        title: Block heading
        facts: name -> value pairs, printed in insertion order
    """
    lines = [SEPARATOR, f"{StatusLabels.STATS} {title}"]
    lines += [f"  {name}: {value}" for name, value in facts.items()]
    lines.append(SEPARATOR)
    return "\n".join(lines)


def _render(header: Sequence[str], rows: Sequence[Sequence[str]], right: set[int] | None = None) -> str:
    """Aligned columns; indices in `right` are right-justified."""
    right = right or set()
    widths = [max(len(str(cell)) for cell in column) for column in zip(header, *rows, strict=True)]

    def line(cells: Sequence[str]) -> str:
        padded = [
            str(c).rjust(w) if i in right else str(c).ljust(w)
            for i, (c, w) in enumerate(zip(cells, widths, strict=True))
        ]
        return "  ".join(padded).rstrip()

    rule = "  ".join("-" * w for w in widths)
    return "\n".join([line(header), rule, *(line(r) for r in rows)])


# =============================================================================
# TABLES
# =============================================================================


def eval_table(reports: Sequence[EvalReport]) -> str:
    """One row per method: images, mIoU (%), mMse."""
    rows = [[r.label, str(r.n), f"{r.miou * 100:.2f}", f"{r.mmse:.4f}"] for r in reports]
    return _render(["Method", "Images", "mIoU (%)", "mMse"], rows, right={1, 2, 3})


def trace_table(rows: Sequence[TraceRow]) -> str:
    """Per-layer output shapes for a concrete input size."""
    body = [[r.name, r.kind, str(r.channels), f"{r.height}x{r.width}", r.source or ""] for r in rows]
    return _render(["Layer", "Kind", "Channels", "Spatial", "Merges"], body, right={2})


def parameter_table(report: Sequence[tuple[str, int]]) -> str:
    """Per-layer parameter counts with a total row."""
    total = sum(count for _, count in report)
    body = [[name, f"{count:,}"] for name, count in report]
    body.append(["total", f"{total:,}"])
    return _render(["Layer", "Parameters"], body, right={1})


def gradcheck_table(results: Sequence[GradCheckResult], tolerance: float = DEFAULT_TOLERANCE) -> str:
    """Max relative error per target with a pass/fail label."""
    body = [
        [
            StatusLabels.OK if r.passed(tolerance) else StatusLabels.FAIL,
            r.target,
            f"{r.max_relative_error:.3e}",
            str(r.checked_entries),
        ]
        for r in results
    ]
    return _render(["", "Target", "Max rel. error", "Entries"], body, right={2, 3})
