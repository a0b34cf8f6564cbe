"""Walk the two-step umbrella trajectory through abstraction and retrieval.

Prints the rendered judge prompt, the admitted experiences at several
thresholds, and the guidance block a later agent would receive.
"""

import argparse
import json
from pathlib import Path

from expbank.abstract import AbstractionConfig, build_bank
from expbank.core import read_trajectories
from expbank.embed import HashEmbedder
from expbank.judge import ScriptedJudge, build_hindsight_prompt
from expbank.search import SearchParams, deep_wide_search, format_guidance

FIXTURES = Path(__file__).resolve().parent.parent / "tests" / "fixtures"


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--trajectories", default=str(FIXTURES / "case_trajectory.jsonl"))
    p.add_argument("--script", default=str(FIXTURES / "case_script.json"))
    p.add_argument("--show-prompt", action="store_true")
    args = p.parse_args()

    trajs = read_trajectories(args.trajectories, strict=True).trajectories
    judge = ScriptedJudge.from_json(json.loads(Path(args.script).read_text()))
    emb = HashEmbedder(64)
    if args.show_prompt:
        print(build_hindsight_prompt(trajs[0]))
        print()

    for delta in (0.0, 5.0, 9.5):
        bank, stats = build_bank(trajs, AbstractionConfig(threshold=delta), judge, emb)
        print(f"delta={delta}: admitted={stats.admitted} ids={[e.id for e in bank.experiences]}")

    bank, _ = build_bank(trajs, AbstractionConfig(), judge, emb)
    print()
    print(format_guidance(deep_wide_search(bank, trajs[0].initial_state, SearchParams(), emb)))


if __name__ == "__main__":
    main()
