from typing import Dict

from pandas import DataFrame as df

from common.errors import ConfigError, OracleError
from common.gradcheck import run_checks
from common.tlog import tlog
from runners.base import Runner, display


class GradcheckRunner(Runner):
    """Finite-difference verification of every primitive and task loss."""

    def __init__(self, data: Dict, debug=False):
        super().__init__("Gradcheck", data, debug)
        gc = self.config.gradcheck
        ops = data.get("ops")
        self.ops = list(gc.ops if ops is None else ops)
        self.corrupt = data.get("corrupt")
        if not self.ops:
            raise ConfigError("no gradient checks requested")

    async def run(self) -> bool:
        gc = self.config.gradcheck
        results = run_checks(self.ops, gc.seed, gc.tolerance, self.corrupt, self.debug)
        table = df(
            [
                {"check": r.name, "max_rel_error": r.error, "result": "pass" if r.passed else "FAIL"}
                for r in results
            ]
        ).set_index("check")
        display("gradient checks", table)

        failed = [r.name for r in results if not r.passed]
        for r in results:
            tlog(f"gradcheck {r.name}", check=r.name, error=r.error, passed=r.passed)
        if failed:
            raise OracleError(f"backward disagrees with finite differences for {failed}")
        return True
