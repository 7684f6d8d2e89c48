"""Command-line interface.

Exit codes: 0 success, 2 invalid arguments or inputs, 3 file I/O failure,
4 solver or classifier divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from smodice import envs
from smodice.datasets import (
    DatasetFormatError,
    ExpertObservations,
    ObservationKind,
    TrajectoryDataset,
    collect,
    expert_state_distribution,
    observations_from_dataset,
)
from smodice.discriminator import TrainingDivergedError
from smodice.envs import GridSpecError
from smodice.eval import (
    brute_force_search,
    finite_sample_study,
    render_policy_grid,
    render_policy_svg,
    solution_report,
)
from smodice.mdp import MdpValidationError, TabularPolicy, compute_occupancy, random_mdp
from smodice.pipeline import METHODS, OCCUPANCIES, REWARDS, run_pipeline
from smodice.solver import SmodiceSolution, SolverDivergedError, evaluate_solution

EXIT_INVALID = 2
EXIT_IO = 3
EXIT_DIVERGED = 4

log = logging.getLogger("smodice")


class UsageError(Exception):
    pass


def _positive_int(text: str) -> int:
    try:
        value = int(float(text))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1 or value != float(text):
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}")
    return value


def _sizes(text: str) -> list:
    return [_positive_int(part) for part in text.split(",") if part.strip()]


def _write(text: str, out) -> None:
    if out is None:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")
    else:
        Path(out).write_text(text)


def _expert_target(exp: envs.GridExperiment) -> np.ndarray:
    """Exact expert state occupancy, or the success-state distribution."""
    S = len(exp.grid.cells())
    if exp.kind == "mismatched":
        return exp.expert_occupancy().state_marginal
    idx = exp.success_states()
    if not idx:
        raise UsageError(f"experiment {exp.name!r} has neither an expert nor success cells")
    d = np.zeros(S)
    np.add.at(d, idx, 1.0)
    return d / d.sum()


# --- commands --------------------------------------------------------------


def cmd_gen_data(args) -> int:
    exp = envs.load_experiment(args.env, args.gamma)
    if args.policy == "expert":
        mdp, policy = exp.expert_mdp(), exp.expert_policy()
    else:
        mdp, policy = exp.imitator_mdp(), envs.random_behavior_policy(exp.grid)
    data = collect(
        mdp,
        policy,
        args.episodes,
        horizon=args.horizon,
        seed=args.seed,
        metadata={"env": exp.name, "policy": args.policy},
    )
    data.save(args.out)
    grid = exp.expert_grid() if args.policy == "expert" else exp.grid
    index = grid.state_index()
    reachable = {index[c] for c in envs.reachable_cells(grid)}
    visited = set(np.unique(np.concatenate([data.states, data.next_states])).tolist())
    coverage = len(visited & reachable) / len(reachable)
    print(f"episodes     {data.num_episodes}")
    print(f"transitions  {data.num_transitions}")
    print(f"coverage     {coverage:.1%} of {len(reachable)} reachable states")
    return 0


def cmd_gen_examples(args) -> int:
    exp = envs.load_experiment(args.env)
    idx = exp.success_states()
    if not idx:
        raise UsageError(f"experiment {exp.name!r} has no success cells")
    states = np.resize(np.array(idx, dtype=np.int64), args.count)
    ExpertObservations(states, ObservationKind.SUCCESS_EXAMPLES).save(args.out)
    print(f"wrote {args.count} success examples over states {sorted(set(idx))}")
    return 0


def cmd_solve(args) -> int:
    if args.method == "closed-form" and args.divergence == "kl":
        raise UsageError("--method closed-form supports only --divergence chi2")
    data = TrajectoryDataset.load(args.data)
    meta = data.metadata
    try:
        S, A = int(meta["num_states"]), int(meta["num_actions"])
    except KeyError:
        if args.env is None:
            raise UsageError("dataset metadata lacks num_states/num_actions; pass --env") from None
        mdp = envs.load_experiment(args.env).imitator_mdp()
        S, A = mdp.num_states, mdp.num_actions
    gamma = args.gamma if args.gamma is not None else float(meta.get("gamma", 0.99))
    expert_data = None
    if args.expert is not None:
        expert_data = TrajectoryDataset.load(args.expert)
        obs = observations_from_dataset(expert_data)
        expert_data.check_bounds(S)
        d_E = expert_state_distribution(obs, S, expert_data, gamma)
    else:
        obs = ExpertObservations.load(args.examples)
        d_E = expert_state_distribution(obs, S)
    result = run_pipeline(
        data,
        d_E,
        S,
        A,
        gamma,
        divergence=args.divergence,
        method=args.method,
        reward_mode=args.reward,
        expert_states=obs,
        expert_data=expert_data,
        occupancy=args.occupancy,
        steps=args.steps,
        lr=args.lr,
        seed=args.seed,
    )
    sol = result.solution
    if args.dump_stage:
        for path in result.dump_stages(args.dump_stage):
            log.info("wrote %s", path)
    sol.save(args.out)
    print(f"objective            {sol.objective_value:.6g}")
    print(f"divergence estimate  {sol.divergence_estimate:.6g}")
    for key, value in sorted(sol.diagnostics.items()):
        print(f"{key:<20} {value:.6g}" if isinstance(value, float) else f"{key:<20} {value}")
    return 0


def _policy_from_args(args, exp: envs.GridExperiment) -> TabularPolicy:
    if args.expert_policy:
        if exp.kind != "mismatched":
            raise UsageError(f"experiment {exp.name!r} has no expert policy")
        return exp.expert_policy()
    if args.solution is None:
        raise UsageError("pass --solution FILE or --expert-policy")
    return SmodiceSolution.load(args.solution).policy


def cmd_eval(args) -> int:
    exp = envs.load_experiment(args.env, args.gamma)
    d_E = _expert_target(exp)
    if args.expert_policy:
        if exp.kind != "mismatched":
            raise UsageError(f"experiment {exp.name!r} has no expert policy")
        # the expert acts in its own MDP; score it there
        target = exp.expert_mdp()
        subject = exp.expert_policy()
    else:
        target = exp.imitator_mdp()
        subject = SmodiceSolution.load(args.solution) if args.solution else None
        if subject is None:
            raise UsageError("pass --solution FILE or --expert-policy")
        if subject.policy.num_states != target.num_states or subject.policy.num_actions != target.num_actions:
            raise UsageError("solution shape does not match the environment")
    metrics = evaluate_solution(target, subject, d_E, exp.success_states() or None)
    if args.brute_force:
        bf = brute_force_search(exp.imitator_mdp(), d_E, workers=args.workers)
        metrics["brute_force"] = bf.to_dict()
        metrics["gap_to_brute_force"] = metrics["state_kl_to_expert"] - bf.value
    if args.json or args.out:
        _write(json.dumps(metrics, indent=2), args.out)
    else:
        if isinstance(subject, SmodiceSolution):
            print(solution_report(subject, metrics))
        else:
            for key, value in metrics.items():
                if isinstance(value, float):
                    print(f"{key:<20} {value:.6g}")
        if args.brute_force:
            print(f"brute-force optimum  {metrics['brute_force']['value']:.6g} "
                  f"({metrics['brute_force']['num_optimal']} optimal policies)")
    return 0


def cmd_render(args) -> int:
    exp = envs.load_experiment(args.env, args.gamma)
    grid = exp.expert_grid() if args.expert_policy else exp.grid
    policy = _policy_from_args(args, exp)
    occupancy = None
    if args.shade:
        mdp = exp.expert_mdp() if args.expert_policy else exp.imitator_mdp()
        occupancy = compute_occupancy(mdp, policy)
    render = render_policy_svg if args.svg else render_policy_grid
    _write(render(grid, policy, occupancy), args.out)
    return 0


def cmd_study(args) -> int:
    if args.env == "random":
        rng = np.random.default_rng(args.seed)
        gamma = args.gamma if args.gamma is not None else 0.9
        mdp = random_mdp(args.num_states, args.num_actions, gamma, rng)
        behavior = TabularPolicy.uniform(args.num_states, args.num_actions)
        d_E = rng.dirichlet(np.ones(args.num_states))
    else:
        exp = envs.load_experiment(args.env, args.gamma)
        mdp = exp.imitator_mdp()
        behavior = envs.random_behavior_policy(exp.grid)
        d_E = _expert_target(exp)
    report = finite_sample_study(
        mdp, behavior, d_E, args.sizes, args.seeds, seed=args.seed, workers=args.workers
    )
    if args.out:
        Path(args.out).write_text(report.to_json())
    print(report.table())
    return 0


# --- parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="smodice",
        description="Tabular offline imitation by state-occupancy matching.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="roll out a policy and write a JSONL dataset")
    p.add_argument("--env", required=True, help="preset name (figure2a, figure2b) or grid JSON file")
    p.add_argument("--policy", choices=("random", "expert"), default="random",
                   help="uniform behavior policy, or the diagonal expert in its own MDP")
    p.add_argument("--episodes", type=_positive_int, required=True, help="number of episodes")
    p.add_argument("--horizon", type=_positive_int, default=None,
                   help="episode length (default: smallest H with gamma^H < 1e-4)")
    p.add_argument("--gamma", type=float, default=None, help="discount (default: the experiment's)")
    p.add_argument("--seed", type=int, default=0, help="PRNG seed")
    p.add_argument("--out", required=True, help="output JSONL path; metadata goes to <out>.meta.json")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("gen-examples", help="write the success states of an experiment as examples")
    p.add_argument("--env", required=True, help="preset name or experiment JSON file")
    p.add_argument("--count", type=_positive_int, default=1, help="number of examples")
    p.add_argument("--out", required=True, help="output JSON path")
    p.set_defaults(func=cmd_gen_examples)

    p = sub.add_parser("solve", help="reward, dual values and weighted BC from a dataset")
    p.add_argument("--data", required=True, help="offline JSONL dataset")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--expert", help="JSONL dataset of expert rollouts (actions ignored)")
    src.add_argument("--examples", help="JSON file of success examples")
    p.add_argument("--divergence", choices=("chi2", "kl"), default="chi2", help="f-divergence")
    p.add_argument("--method", choices=METHODS, default="closed-form", help="dual solver")
    p.add_argument("--reward", choices=REWARDS, default="counts",
                   help="log-ratio from counts, or a trained state classifier")
    p.add_argument("--occupancy", choices=OCCUPANCIES, default="model",
                   help="d_O from the estimated MDP and behavior policy, or from raw counts")
    p.add_argument("--gamma", type=float, default=None, help="discount (default: dataset metadata)")
    p.add_argument("--steps", type=_positive_int, default=20000, help="iterative solver steps")
    p.add_argument("--lr", type=float, default=None, help="iterative step size (default 0.1 chi2, 0.01 kl)")
    p.add_argument("--seed", type=int, default=0, help="seed for the iterative solver")
    p.add_argument("--env", default=None, help="environment, only if dataset metadata lacks sizes")
    p.add_argument("--dump-stage", metavar="DIR", default=None,
                   help="also write d_O, d_E, reward, V* and the estimated MDP to DIR")
    p.add_argument("--out", required=True, help="solution JSON path")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("eval", help="score a policy's exact occupancy against the expert")
    p.add_argument("--env", required=True, help="preset name or experiment JSON file")
    who = p.add_mutually_exclusive_group(required=True)
    who.add_argument("--solution", help="solution JSON from solve")
    who.add_argument("--expert-policy", action="store_true", help="score the expert itself")
    p.add_argument("--gamma", type=float, default=None, help="discount (default: the experiment's)")
    p.add_argument("--brute-force", action="store_true",
                   help="also search all deterministic imitator policies")
    p.add_argument("--workers", type=_positive_int, default=1, help="threads for the search")
    p.add_argument("--json", action="store_true", help="print metrics as JSON")
    p.add_argument("--out", default=None, help="write JSON metrics here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", help="draw a policy on its grid")
    p.add_argument("--env", required=True, help="preset name or experiment JSON file")
    who = p.add_mutually_exclusive_group(required=True)
    who.add_argument("--solution", help="solution JSON from solve")
    who.add_argument("--expert-policy", action="store_true", help="draw the expert policy")
    p.add_argument("--gamma", type=float, default=None, help="discount used for shading")
    p.add_argument("--shade", action="store_true", help="shade cells by state occupancy")
    p.add_argument("--svg", action="store_true", help="emit SVG instead of text")
    p.add_argument("--out", default=None, help="output path (default stdout)")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("study", help="finite-sample error of the closed-form values")
    p.add_argument("--env", default="random", help="'random', a preset name, or a grid JSON file")
    p.add_argument("--sizes", type=_sizes, default=[1000, 4000, 16000, 64000],
                   help="comma-separated transition counts, increasing")
    p.add_argument("--seeds", type=_positive_int, default=20, help="seeds per size")
    p.add_argument("--num-states", type=_positive_int, default=5, help="random MDP states")
    p.add_argument("--num-actions", type=_positive_int, default=3, help="random MDP actions")
    p.add_argument("--gamma", type=float, default=None, help="discount (random default 0.9)")
    p.add_argument("--seed", type=int, default=0, help="base seed")
    p.add_argument("--workers", type=_positive_int, default=1, help="threads over seeds")
    p.add_argument("--out", default=None, help="write the JSON report here")
    p.set_defaults(func=cmd_study)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (SolverDivergedError, TrainingDivergedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (UsageError, DatasetFormatError, GridSpecError, MdpValidationError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
