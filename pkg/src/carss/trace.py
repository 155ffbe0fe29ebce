"""Rollout traces (JSON Lines) and SVG rendering of finished tours.

A trace file has one JSON object per line, each with a ``type`` field:

``header``   instance id, ``n``, ``K``, ``coords``, ``starts``, ``t_prime``
``gen``      step ``t`` and the joint action as ``[agent, vertex, side]`` triples
``merge_start``  ``q_start`` and the merge-graph endpoint vertices
``merge``    step ``t``, endpoint indices ``p``/``q``, vertices ``u``/``v``, ``reward``
``result``   tour ``order``, ``length`` and the isolated vertices

Only traces that end with a ``result`` record can be rendered.
"""

from __future__ import annotations

import json
import xml.etree.ElementTree as ET
from pathlib import Path

from .env import FRONT, REAR
from .exceptions import FormatError, NotTerminalError

PALETTE = ["#1f77b4", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
           "#e377c2", "#17becf", "#bcbd22", "#7f7f7f", "#393b79"]


def build_trace(sol) -> list[dict]:
    """Trace records for a :class:`~carss.rollout.Solution`."""
    gen, ms = sol.gen_state, sol.merge_state
    inst = gen.inst
    out = [{
        "type": "header",
        "instance_id": inst.id,
        "n": inst.n,
        "K": gen.K,
        "coords": inst.coords.tolist(),
        "starts": list(gen.starts),
        "t_prime": gen.t_prime,
    }]
    for t, actions in enumerate(gen.history):
        out.append({"type": "gen", "t": t,
                    "actions": [[a.agent, a.vertex, a.side] for a in actions]})
    orig = ms.graph.endpoint_orig
    out.append({"type": "merge_start", "q_start": ms.q_start, "endpoints": orig.tolist()})
    last = len(ms.edges) - 1
    for t, e in enumerate(ms.edges):
        out.append({"type": "merge", "t": t, "p": e.p, "q": e.q, "u": int(orig[e.p]),
                    "v": int(orig[e.q]), "reward": ms.reward if t == last else 0.0})
    out.append({"type": "result", "order": sol.tour.order.tolist(), "length": sol.tour.length,
                "isolated": list(gen.isolated)})
    return out


def dumps_trace(records) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)


def write_trace(records, path) -> None:
    Path(path).write_text(dumps_trace(records))


def read_trace(path) -> list[dict]:
    records = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"bad JSON: {exc.msg}", lineno, path) from None
        if not isinstance(rec, dict) or "type" not in rec:
            raise FormatError("record lacks a 'type' field", lineno, path)
        records.append(rec)
    if not records or records[0]["type"] != "header":
        raise FormatError("trace must start with a header record", 1, path)
    return records


def trace_paths(records) -> list[list[int]]:
    """Replay the generation records into per-agent vertex sequences."""
    header = records[0]
    paths = [[v] for v in header["starts"]]
    for rec in records:
        if rec["type"] != "gen":
            continue
        for agent, vertex, side in rec["actions"]:
            if side == FRONT:
                paths[agent].insert(0, vertex)
            elif side == REAR:
                paths[agent].append(vertex)
            else:
                raise FormatError(f"bad side {side!r} in generation step {rec['t']}")
    return paths


def render_svg(records, size: int = 600, margin: int = 24, radius: float = 4.0) -> str:
    """SVG of a finished trace: solid agent subpaths, dashed merge edges,
    red start markers and hollow markers for isolated vertices."""
    kinds = {r["type"] for r in records}
    if "result" not in kinds:
        raise NotTerminalError("trace has no result record; only finished rollouts can be rendered")
    header = records[0]
    coords = header["coords"]
    result = next(r for r in records if r["type"] == "result")
    merges = [r for r in records if r["type"] == "merge"]
    xs = [c[0] for c in coords]
    ys = [c[1] for c in coords]
    lo_x, lo_y = min(xs), min(ys)
    span = max(max(xs) - lo_x, max(ys) - lo_y) or 1.0
    scale = (size - 2 * margin) / span

    def pt(v):
        x, y = coords[v]
        return margin + (x - lo_x) * scale, size - margin - (y - lo_y) * scale

    svg = ET.Element("svg", xmlns="http://www.w3.org/2000/svg", width=str(size),
                     height=str(size), viewBox=f"0 0 {size} {size}")
    ET.SubElement(svg, "rect", width=str(size), height=str(size), fill="white")
    for k, path in enumerate(trace_paths(records)):
        color = PALETTE[k % len(PALETTE)]
        for u, v in zip(path[:-1], path[1:]):
            (x1, y1), (x2, y2) = pt(u), pt(v)
            ET.SubElement(svg, "line", {"class": f"subpath agent-{k}", "x1": f"{x1:.2f}",
                                        "y1": f"{y1:.2f}", "x2": f"{x2:.2f}", "y2": f"{y2:.2f}",
                                        "stroke": color, "stroke-width": "2"})
    for rec in merges:
        (x1, y1), (x2, y2) = pt(rec["u"]), pt(rec["v"])
        ET.SubElement(svg, "line", {"class": "merge", "x1": f"{x1:.2f}", "y1": f"{y1:.2f}",
                                    "x2": f"{x2:.2f}", "y2": f"{y2:.2f}", "stroke": "black",
                                    "stroke-width": "1.5", "stroke-dasharray": "6 4"})
    starts = set(header["starts"])
    isolated = set(result["isolated"])
    for v in range(len(coords)):
        x, y = pt(v)
        attrs = {"cx": f"{x:.2f}", "cy": f"{y:.2f}", "r": str(radius)}
        if v in starts:
            attrs.update({"class": "start", "fill": "red", "stroke": "red"})
        elif v in isolated:
            attrs.update({"class": "isolated", "fill": "none", "stroke": "black",
                          "stroke-width": "1.5"})
        else:
            attrs.update({"class": "vertex", "fill": "black"})
        ET.SubElement(svg, "circle", attrs)
    title = ET.SubElement(svg, "title")
    title.text = f"{header['instance_id']} n={header['n']} K={header['K']} length={result['length']:.4f}"
    return ET.tostring(svg, encoding="unicode") + "\n"
