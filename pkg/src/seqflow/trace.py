"""Execution event recording plus dot and SVG export.

The recorder keeps one append-only buffer per thread and merges them at
export, so recording stays off the critical path.  Timestamps are monotonic
nanoseconds relative to the moment the graph was attached to an engine.
"""

from __future__ import annotations

import threading
import time

# event kinds
TASK_START = "TaskStart"
TASK_END = "TaskEnd"
PUSH = "Push"
POP = "Pop"
STAGE_IN_BEGIN = "StageInBegin"
STAGE_IN_END = "StageInEnd"
COMM_POSTED = "CommPosted"
COMM_COMPLETE = "CommComplete"

INSERTER_ID = -1
AGENT_ID = -2


class TraceRecorder:
    """Collects (kind, t_ns, worker_id, task_id, extra) tuples per thread."""

    def __init__(self, enabled: bool = True):
        self.enabled = enabled
        self._t0 = time.perf_counter_ns()
        self._buffers = {}
        self._buffer_lock = threading.Lock()

    def start_clock(self) -> None:
        self._t0 = time.perf_counter_ns()

    def _buf(self):
        ident = threading.get_ident()
        buf = self._buffers.get(ident)
        if buf is None:
            with self._buffer_lock:
                buf = self._buffers.setdefault(ident, [])
        return buf

    def _record(self, kind, wid, tid, extra=None):
        if not self.enabled:
            return
        self._buf().append((kind, time.perf_counter_ns() - self._t0, wid, tid, extra))

    # call sites keep these one-liners so disabling tracing is one branch

    def task_start(self, wid, task):
        self._record(TASK_START, wid, task.tid)

    def task_end(self, wid, task):
        self._record(TASK_END, wid, task.tid)

    def pushed(self, wid, task):
        self._record(PUSH, wid, task.tid)

    def popped(self, wid, task):
        self._record(POP, wid, task.tid)

    def stage_begin(self, wid, task, hid):
        self._record(STAGE_IN_BEGIN, wid, task.tid, hid)

    def stage_end(self, wid, task, hid):
        self._record(STAGE_IN_END, wid, task.tid, hid)

    def comm_posted(self, wid, task):
        self._record(COMM_POSTED, wid, task.tid)

    def comm_complete(self, wid, task):
        self._record(COMM_COMPLETE, wid, task.tid)

    def export_events(self) -> list:
        """All events merged and sorted by timestamp."""
        with self._buffer_lock:
            buffers = [list(b) for b in self._buffers.values()]
        merged = [ev for buf in buffers for ev in buf]
        merged.sort(key=lambda ev: ev[1])
        return merged


# -- dot export --------------------------------------------------------------


def _dot_quote(text: str) -> str:
    return '"' + text.replace("\\", "\\\\").replace('"', '\\"') + '"'


def successor_edges(handles) -> set:
    """Immediate successor pairs (src_tid, dst_tid) from consecutive slots."""
    edges = set()
    for handle in handles:
        for i in range(len(handle.slots) - 1):
            for src in handle.slots[i].tasks:
                for dst in handle.slots[i + 1].tasks:
                    edges.add((src.tid, dst.tid))
    return edges


def render_dot(graph, show_deps: bool = False) -> str:
    """Dot digraph: one node per task, one edge per successor pair.

    Disabled and speculative tasks render dashed.  With show_deps, each edge
    is annotated with the handle ids that induce it.
    """
    tasks = graph.all_tasks()
    handles = graph.core.registry.all_handles()
    lines = ["digraph taskgraph {"]
    for task in tasks:
        attrs = [f"label={_dot_quote(task.label)}"]
        from .task import TaskState

        if task.state is TaskState.DISABLED or task.spec_role == "duplicate":
            attrs.append("style=dashed")
        lines.append(f"  t{task.tid} [{', '.join(attrs)}];")

    by_pair = {}
    for handle in handles:
        for i in range(len(handle.slots) - 1):
            for src in handle.slots[i].tasks:
                for dst in handle.slots[i + 1].tasks:
                    by_pair.setdefault((src.tid, dst.tid), set()).add(handle.hid)
    for (src, dst) in sorted(by_pair):
        if show_deps:
            label = ",".join(f"h{h}" for h in sorted(by_pair[(src, dst)]))
            lines.append(f"  t{src} -> t{dst} [label={_dot_quote(label)}];")
        else:
            lines.append(f"  t{src} -> t{dst};")
    lines.append("}")
    return "\n".join(lines) + "\n"


def generate_dot(graph, path=None, show_deps: bool = False) -> str:
    text = render_dot(graph, show_deps)
    if path is not None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    return text


# -- timeline assembly -------------------------------------------------------


def build_lanes(events):
    """Per-worker task intervals [(start, end, tid)] from start/end events."""
    lanes = {}
    open_task = {}
    for kind, t, wid, tid, _ in events:
        if kind == TASK_START:
            open_task[wid] = (tid, t)
        elif kind == TASK_END:
            started = open_task.pop(wid, None)
            if started is not None and started[0] == tid:
                lanes.setdefault(wid, []).append((started[1], t, tid))
    return lanes


def build_ready_steps(events):
    """Step function [(t, count)] of scheduler-resident tasks over time."""
    steps = [(0, 0)]
    count = 0
    for kind, t, _, _, _ in events:
        if kind == PUSH:
            count += 1
            steps.append((t, count))
        elif kind == POP:
            count -= 1
            steps.append((t, count))
    return steps


# -- SVG export --------------------------------------------------------------

_LANE_H = 26
_LANE_GAP = 8
_LEFT = 90
_PLOT_W = 1000
_CURVE_H = 90
_TOP = 30

_ROLE_FILL = {
    None: "#4c78a8",
    "snapshot": "#b8a344",
    "duplicate": "#a85ca8",
    "select": "#b8a344",
    "comm": "#5aa469",
}


def render_trace_svg(graph, show_dep_arrows: bool = False, out=None) -> str:
    """Timeline SVG: one lane per worker, ready-count curve beneath.

    Also prints a per-worker idle-time scalar (an extension beyond the trace
    file itself).
    """
    events = graph.trace.export_events()
    lanes = build_lanes(events)
    steps = build_ready_steps(events)
    tasks = {t.tid: t for t in graph.all_tasks()}

    tmax = max([ev[1] for ev in events], default=1) or 1
    wids = sorted(lanes)
    n_lanes = max(len(wids), 1)

    def x(t):
        return _LEFT + (t / tmax) * _PLOT_W

    def lane_y(i):
        return _TOP + i * (_LANE_H + _LANE_GAP)

    curve_top = lane_y(n_lanes) + 30
    height = curve_top + _CURVE_H + 40
    width = _LEFT + _PLOT_W + 30

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
    ]

    rect_pos = {}  # tid -> (x0, x1, ymid) for dep arrows
    for i, wid in enumerate(wids):
        y = lane_y(i)
        label = {INSERTER_ID: "inserter", AGENT_ID: "agent"}.get(wid, f"worker {wid}")
        parts.append(
            f'<text x="6" y="{y + _LANE_H * 0.7:.1f}" font-size="12" '
            f'font-family="sans-serif">{label}</text>'
        )
        for start, end, tid in lanes[wid]:
            x0, x1 = x(start), x(end)
            w = max(x1 - x0, 1.0)
            task = tasks.get(tid)
            role = getattr(task, "spec_role", None)
            if task is not None and task.comm_op is not None:
                role = "comm"
            fill = _ROLE_FILL.get(role, _ROLE_FILL[None])
            parts.append(
                f'<rect x="{x0:.2f}" y="{y}" width="{w:.2f}" height="{_LANE_H}" '
                f'fill="{fill}" stroke="#333" stroke-width="0.5"/>'
            )
            rect_pos[tid] = (x0, x1, y + _LANE_H / 2)
            if task is not None and w > 8 * len(task.label) * 0.6:
                parts.append(
                    f'<text x="{x0 + 3:.2f}" y="{y + _LANE_H * 0.7:.1f}" '
                    f'font-size="10" font-family="sans-serif" '
                    f'fill="white">{task.label}</text>'
                )

    if show_dep_arrows:
        for src, dst in sorted(successor_edges(graph.core.registry.all_handles())):
            if src in rect_pos and dst in rect_pos:
                _, sx1, sy = rect_pos[src]
                dx0, _, dy = rect_pos[dst]
                parts.append(
                    f'<line x1="{sx1:.2f}" y1="{sy:.2f}" x2="{dx0:.2f}" '
                    f'y2="{dy:.2f}" stroke="#888" stroke-width="0.8"/>'
                )

    # ready-count step curve
    max_count = max([c for _, c in steps], default=1) or 1
    base = curve_top + _CURVE_H

    def cy(count):
        return base - (count / max_count) * _CURVE_H

    points = []
    prev = 0
    for t, count in steps:
        points.append(f"{x(t):.2f},{cy(prev):.2f}")
        points.append(f"{x(t):.2f},{cy(count):.2f}")
        prev = count
    points.append(f"{x(tmax):.2f},{cy(prev):.2f}")
    parts.append(
        f'<text x="6" y="{curve_top + 12}" font-size="12" '
        f'font-family="sans-serif">ready tasks (max {max_count})</text>'
    )
    parts.append(
        f'<polyline points="{" ".join(points)}" fill="none" '
        f'stroke="#c44" stroke-width="1.2"/>'
    )
    parts.append(
        f'<line x1="{_LEFT}" y1="{base}" x2="{_LEFT + _PLOT_W}" y2="{base}" '
        f'stroke="#999" stroke-width="0.6"/>'
    )
    parts.append("</svg>")

    span_ms = tmax / 1e6
    for i, wid in enumerate(wids):
        busy = sum(end - start for start, end, _ in lanes[wid]) / 1e6
        label = {INSERTER_ID: "inserter", AGENT_ID: "agent"}.get(wid, f"worker {wid}")
        print(
            f"[trace] {label}: idle {span_ms - busy:.3f} ms of {span_ms:.3f} ms "
            "(idle metric is an extension, not part of the trace file)",
            file=out,
        )

    return "\n".join(parts) + "\n"


def generate_trace_svg(graph, path=None, show_dep_arrows: bool = False) -> str:
    text = render_trace_svg(graph, show_dep_arrows)
    if path is not None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    return text
