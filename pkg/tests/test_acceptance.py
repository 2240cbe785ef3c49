"""The thirteen acceptance criteria at their stated tolerances, one test each."""

import pytest

from nelsonlab import checks as ck

from conftest import ACCEPTANCE_LINES

NAMES = {1: "conservation", 2: "dressing_closed_form", 3: "commuting_flows", 4: "energy_pullback",
         5: "symplectic", 6: "dressing_identity", 7: "phase", 8: "renorm", 9: "cutoff_convergence",
         10: "beta_trend", 11: "norm_trend", 12: "structural", 13: "heisenberg"}


@pytest.mark.slow
class TestAcceptance:
    """Each criterion runs through checks.run_check and prints one pass/fail line."""

    @pytest.mark.parametrize("criterion", sorted(NAMES), ids=[f"{n:02d}-{NAMES[n]}" for n in sorted(NAMES)])
    def test_criterion(self, criterion):
        r = ck.run_check(criterion, ck.CheckSettings())
        line = r.line() + f" ({r.seconds:.1f}s)"
        print(line)
        ACCEPTANCE_LINES.append(line)
        assert r.name == NAMES[criterion]
        assert r.passed, f"{line}\n{r.details}"
