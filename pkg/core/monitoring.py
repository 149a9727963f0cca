"""Tree-move acceptance monitoring per forest."""

import logging
from typing import Any, Dict, Tuple

log = logging.getLogger("sacebart.monitoring")

_FIELDS = ("proposed", "accepted", "infeasible")


class MoveMonitor:
    """Counts proposed/accepted/infeasible MH moves per (forest, move) and flags stuck forests."""

    def __init__(self, alert_threshold: float = 0.01, min_proposals: int = 500):
        self.alert_threshold = alert_threshold
        self.min_proposals = min_proposals
        self._counts: Dict[Tuple[str, str], Dict[str, int]] = {}
        self._alerted: Dict[str, bool] = {}

    def record(self, forest: str, outcome) -> None:
        c = self._counts.setdefault((forest, outcome.move), dict.fromkeys(_FIELDS, 0))
        c["proposed"] += 1
        if not outcome.feasible:
            c["infeasible"] += 1
        elif outcome.accepted:
            c["accepted"] += 1

    def check_alerts(self) -> Dict[str, bool]:
        """Return {forest: True} for forests whose acceptance rate just fell below the threshold."""
        fired = {}
        for forest, rate in self.acceptance_by_forest().items():
            proposed = sum(c["proposed"] for (f, _), c in self._counts.items() if f == forest)
            if proposed < self.min_proposals:
                continue
            if rate < self.alert_threshold:
                if not self._alerted.get(forest, False):
                    self._alerted[forest] = True
                    log.warning("ALERTE: foret %s, taux d'acceptation %.4f (%d propositions).",
                                forest, rate, proposed)
                    fired[forest] = True
            elif self._alerted.get(forest):
                log.info("Foret %s: taux d'acceptation revenu a %.4f.", forest, rate)
                self._alerted[forest] = False
        return fired

    def acceptance_rate(self, forest: str, move: str) -> float:
        c = self._counts.get((forest, move))
        if not c or c["proposed"] == 0:
            return 0.0
        return c["accepted"] / c["proposed"]

    def acceptance_by_forest(self) -> Dict[str, float]:
        totals: Dict[str, list] = {}
        for (forest, _), c in self._counts.items():
            t = totals.setdefault(forest, [0, 0])
            t[0] += c["accepted"]
            t[1] += c["proposed"]
        return {f: (a / p if p else 0.0) for f, (a, p) in totals.items()}

    def get_status(self) -> Dict[str, Dict[str, Any]]:
        out: Dict[str, Dict[str, Any]] = {}
        for (forest, move), c in sorted(self._counts.items()):
            out.setdefault(forest, {})[move] = dict(c, rate=self.acceptance_rate(forest, move))
        return out

    def to_dict(self) -> Dict[str, Any]:
        return {f"{forest}/{move}": dict(c) for (forest, move), c in sorted(self._counts.items())}

    def load_dict(self, data: Dict[str, Any]) -> None:
        self._counts = {}
        for key, c in data.items():
            forest, move = key.rsplit("/", 1)
            self._counts[(forest, move)] = {k: int(c.get(k, 0)) for k in _FIELDS}
