"""Run a mock scenario under every pipeline mode and print a comparison table.

    python3 scripts/compare_modes.py [SCENARIO ...]
"""

import argparse

from ragloop.evaluation import Judge, score_episode, summarize
from ragloop.mocks import available_scenarios, load_scenario, run_scenario
from ragloop.orchestrator import PipelineMode


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("scenarios", nargs="*", default=available_scenarios())
    args = parser.parse_args()
    print(f"{'scenario':<20}{'mode':<10}{'n':>3}{'EM':>8}{'LLM':>8}{'searches':>10}  new docs per turn")
    for name in args.scenarios:
        sc = load_scenario(name)
        for mode in PipelineMode:
            if mode not in sc.modes:
                continue
            episodes = run_scenario(sc, mode)
            s = summarize(score_episode(ep, Judge(sc.judge_backend())) for ep in episodes)
            counts = " ".join(str(ep.new_document_counts) for ep in episodes)
            print(f"{name:<20}{mode.value:<10}{s.n:>3}{s.em_mean:>8.3f}{s.llm_match_mean:>8.3f}"
                  f"{s.avg_retrievals:>10.3f}  {counts}")


if __name__ == "__main__":
    main()
