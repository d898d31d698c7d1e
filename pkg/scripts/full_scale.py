"""Full-scale run against live services: every mode on one sampled question set.

Needs a Search-R1 reasoner behind an OpenAI-compatible endpoint, a retrieval
service, and a chat-completions endpoint for the extractor and judge
(key in $OPENAI_API_KEY). Example:

    python3 scripts/full_scale.py --dataset hotpotqa_dev.jsonl \\
        --reasoner-url http://gpu-box:8001/v1 --retriever-url http://gpu-box:8000/retrieve \\
        --out runs/hotpotqa

Afterwards the average search counts are printed next to the reference values
below, together with the direction of each difference from baseline.
"""

import argparse
import json
import sys
from pathlib import Path

from ragloop.cli import main as cli_main

# Published average searches per question for the 7b PPO reasoner on a
# 500-question validation sample; hybrid was not reported as a number.
REFERENCE_AVG_SEARCHES = {"baseline": 2.392, "context": 2.142, "dedup": 2.498}
MODES = ("baseline", "dedup", "context", "hybrid")


def main() -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--dataset", required=True)
    p.add_argument("--reasoner-url", required=True)
    p.add_argument("--retriever-url", required=True)
    p.add_argument("--llm-url", default="https://api.openai.com/v1")
    p.add_argument("--out", required=True)
    p.add_argument("--n-sample", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--concurrency", type=int, default=4)
    p.add_argument("--modes", nargs="+", default=list(MODES), choices=MODES)
    args = p.parse_args()

    rc = 0
    for mode in args.modes:
        rc |= cli_main([
            "run", "--mode", mode, "--dataset", args.dataset, "--n-sample", str(args.n_sample),
            "--seed", str(args.seed), "--reasoner-url", args.reasoner_url, "--retriever-url", args.retriever_url,
            "--llm-url", args.llm_url, "--concurrency", str(args.concurrency), "--score-reasoning",
            "--out", str(Path(args.out) / mode),
        ])

    summaries = {}
    for mode in args.modes:
        path = Path(args.out) / mode / "summary.json"
        if path.exists():
            summaries[mode] = json.loads(path.read_text())
    base = summaries.get("baseline", {}).get("avg_retrievals")
    print(f"{'mode':<10}{'EM':>8}{'LLM':>8}{'searches':>10}{'reference':>11}{'vs baseline':>13}")
    for mode, s in summaries.items():
        ref = REFERENCE_AVG_SEARCHES.get(mode)
        delta = "" if base is None or mode == "baseline" else f"{s['avg_retrievals'] - base:+.3f}"
        llm = s["llm_match_mean"]
        print(f"{mode:<10}{s['em_mean']:>8.3f}{'' if llm is None else f'{llm:.3f}':>8}"
              f"{s['avg_retrievals']:>10.3f}{'' if ref is None else f'{ref:.3f}':>11}{delta:>13}")
    return rc


if __name__ == "__main__":
    sys.exit(main())
