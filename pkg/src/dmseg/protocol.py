"""Automatic cluster-count protocol for the second-stage boundaries.

After the second map runs with the elbow-estimated cluster count, the
lowest localized boundary's distances to its neighbours decide whether a
known-but-faint boundary was missed.  If so (and the elbow said 6), a k=2
rescue map restricted between the second and third boundaries recovers
it; a smaller elbow count means genuinely merged layers and the reduced
output is accepted; 7 means everything was found directly.
"""

from __future__ import annotations

import numpy as np

INNER_IDS = ("2", "3", "4", "5", "6", "6a")


def _assign_ids(count: int, skip: str | None = None):
    ids = [s for s in INNER_IDS if s != skip]
    return ids[:count]


def auto_cluster_protocol(boundaries, provenances, decided_k, s1, s7,
                          rescue_fn, enabled: bool = True):
    """Map ordered inner boundaries to surface ids, rescuing missed ones.

    Parameters
    ----------
    boundaries, provenances : list of (nz, ncols) arrays, top to bottom.
    decided_k : int
        Cluster count the second stage actually used (elbow estimate when
        the protocol is enabled).
    s1, s7 : arrays bounding the region of interest (aligned coordinates).
    rescue_fn : callable(upper, lower) -> (rows, prov) or None
        Runs the k=2 rescue map between two boundaries.

    Returns (mapping id -> (rows, prov), events).
    """
    events = []
    m = len(boundaries)
    out = {}

    def finish(ids, skip=None):
        for sid, rows, prov in zip(ids, boundaries, provenances):
            out[sid] = (rows, prov)
        if len(ids) < m:
            events.append({"event": "protocol", "note":
                           f"dropped {m - len(ids)} extra boundaries"})
        return out, events

    if not enabled or m == 0:
        if m:
            events.append({"event": "protocol", "step": "disabled"})
        return finish(_assign_ids(m))

    lowest = boundaries[-1]
    above = boundaries[-2] if m >= 2 else s1
    d_below = float(np.nanmean(s7 - lowest))
    d_above = float(np.nanmean(lowest - above))

    if d_above <= d_below:
        events.append({"event": "protocol", "step": "3a",
                       "d_above": d_above, "d_below": d_below})
        return finish(_assign_ids(m))

    events.append({"event": "protocol", "step": "3b",
                   "d_above": d_above, "d_below": d_below})
    if decided_k == 6:
        events.append({"event": "protocol", "step": "4a", "k": decided_k})
        rescued = rescue_fn(boundaries[0], boundaries[1]) if m >= 2 else None
        if rescued is None:
            events.append({"event": "protocol", "step": "5",
                           "rescued": False, "missing": "3"})
            return finish(_assign_ids(m, skip="3"))
        rows, prov = rescued
        boundaries.insert(1, rows)
        provenances.insert(1, prov)
        m += 1
        events.append({"event": "protocol", "step": "5", "rescued": True})
        return finish(_assign_ids(m))
    if decided_k < 6:
        events.append({"event": "protocol", "step": "4b", "k": decided_k,
                       "note": "merged layers accepted"})
        return finish(_assign_ids(m))
    events.append({"event": "protocol", "step": "4c", "k": decided_k})
    return finish(_assign_ids(m))
