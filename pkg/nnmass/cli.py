"""
The `nnmass` command line.

JSON and CSV in, JSON and CSV out. Single JSON documents go to stdout, files are only written through --out, logs go to
    stderr. Domain errors exit with status 1 and an error document `{"code", "message", "context"}` on stderr; usage
    errors exit with status 2.
"""
import argparse
import json
import logging
import os
import sys

from . import analysis, datasets, design, network, randmat, topology
from .errors import NNMassError
from .topology import ArchitectureSpec
from .utils import derive_seed

logger = logging.getLogger(__name__)


def _emit(document):
    sys.stdout.write(json.dumps(document, sort_keys=True) + "\n")


def _cells(text):
    """Parse "4x2,4x3" into [(4, 2), (4, 3)], depth first."""
    try:
        cells = [tuple(int(part) for part in item.lower().split("x")) for item in text.split(",") if item]
    except ValueError:
        cells = None
    if not cells or any(len(cell) != 2 for cell in cells):
        raise argparse.ArgumentTypeError(f"Expected DEPTHxWIDTH,..., got {text!r}")
    return cells


def _seed(text):
    value = int(text, 0)
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError(f"Seeds are 64-bit unsigned integers, got {text}")
    return value


# region Commands
def cmd_mass(args):
    _emit(topology.mass_report(ArchitectureSpec.load(args.arch)).to_dict())


def cmd_degree(args):
    arch = ArchitectureSpec.load(args.arch)
    degree = topology.avg_degree(arch)
    document = {
        "estimate": degree.estimate,
        "exact_longrange": degree.exact_longrange,
        "per_cell": [topology.cell_avg_degree(cell)._asdict() for cell in arch.cells],
    }
    if args.seed is not None:
        document["realized"] = [stats._asdict() for stats in
                                topology.realized_degree(topology.realize_topology(arch, args.seed))]
    _emit(document)


def cmd_realize(args):
    realization = topology.realize_topology(ArchitectureSpec.load(args.arch), args.seed)
    count = topology.count_links_oracle(realization)
    if args.out:
        with open(args.out, "w") as wb:
            json.dump(realization.to_dict(), wb, sort_keys=True)
        _emit({"total_links": count.total, "per_layer": list(count.per_layer), "seed": args.seed})
    else:
        _emit(realization.to_dict())


def cmd_simulate_sv(args):
    rows = randmat.iter_mass_sweep(args.width, randmat.parse_grid(args.mass), args.trials, args.variance, args.seed,
                                   args.jobs)
    with open(args.out, "w", newline="") as wb:
        randmat.write_sweep_csv(rows, wb)


def cmd_gen_data(args):
    make = datasets.gen_seg if args.kind == "seg" else datasets.gen_circle
    dataset = make(args.n, args.samples, args.seed)
    with open(args.out, "w", newline="") as wb:
        datasets.export_csv(dataset, wb)


def cmd_load_idx(args):
    dataset = datasets.load_idx(args.images, args.labels)
    if args.out:
        with open(args.out, "w", newline="") as wb:
            datasets.export_csv(dataset, wb)
    _emit({"n_samples": len(dataset), "feature_dim": dataset.feature_dim, "n_classes": dataset.n_classes})


def _dataset_ref(args):
    if args.dataset == "idx":
        return datasets.DatasetRef("idx", train_images=args.train_images, train_labels=args.train_labels,
                                   test_images=args.test_images, test_labels=args.test_labels)
    return datasets.DatasetRef.parse(args.dataset, train_samples=args.train_samples,
                                     test_samples=args.test_samples)


def cmd_train(args):
    arch = ArchitectureSpec.load(args.arch)
    train_set, test_set = datasets.load_ref(_dataset_ref(args), derive_seed(args.seed, 3))
    model = network.build_model(arch, derive_seed(args.seed, 0), derive_seed(args.seed, 1))
    config = network.TrainConfig(args.epochs, args.batch_size, args.lr, args.schedule, derive_seed(args.seed, 2))
    trace = network.train(model, train_set, test_set, config)

    if args.out:
        with open(args.out, "w", newline="") as wb:
            trace.write_csv(wb)
    if args.checkpoint:
        network.save_checkpoint(model, args.checkpoint)
    final = trace.epochs[-1]
    _emit({"epoch": final.epoch, "train_loss": final.train_loss, "train_acc": final.train_acc,
           "test_acc": final.test_acc, "hyperparameters": trace.hyperparameters})


def cmd_ldi(args):
    arch = ArchitectureSpec.load(args.arch)
    model = network.build_model(arch, derive_seed(args.seed, 0), derive_seed(args.seed, 1), jacobian_experiment=True)
    probe = network.default_probe(arch.input_dim, args.probes, derive_seed(args.seed, 4))
    _emit(network.ldi_report(model, probe).to_dict())


def cmd_sweep(args):
    grid = analysis.SweepGrid.load(args.grid)
    grid = analysis.SweepGrid.from_dict(dict(grid.to_dict(), seed=args.seed))
    data = analysis.load_sweep_data(grid)
    with open(args.out, "w", newline="") as wb:
        analysis.run_sweep(grid, args.jobs, wb, data)


def cmd_fit(args):
    with open(args.csv, "r", newline="") as rb:
        rows = analysis.read_sweep_csv(rb)
    fit = analysis.fit_rows(rows, args.x, args.y, "log" if args.log else "identity", args.per_repeat)
    _emit(fit.to_dict())


def cmd_design(args):
    query = design.DesignQuery(args.target_mass, args.cells, args.tol, args.max_params, args.input_dim,
                               args.output_dim, args.activation)
    _emit(design.design_for_mass(query, args.method).to_dict())


def cmd_compress(args):
    result = design.compress(ArchitectureSpec.load(args.arch), args.cells, args.tol, args.method, args.max_params)
    _emit(result.to_dict())
# endregion


def build_parser():
    parser = argparse.ArgumentParser(prog="nnmass", description=__doc__.strip().splitlines()[0])
    parser.add_argument("--log-level", default=os.environ.get("NNMASS_LOG_LEVEL", "WARNING"), type=str.upper,
                        choices=("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"),
                        help="Logging level for stderr. Defaults to $NNMASS_LOG_LEVEL or WARNING.")
    commands = parser.add_subparsers(dest="command", required=True)

    def command(name, handler, help_text):
        sub = commands.add_parser(name, help=help_text)
        sub.set_defaults(handler=handler)
        return sub

    sub = command("mass", cmd_mass, "NN-Density, NN-Mass and average degree of an architecture")
    sub.add_argument("--arch", required=True)

    sub = command("degree", cmd_degree, "Average degree, optionally measured on a realization")
    sub.add_argument("--arch", required=True)
    sub.add_argument("--seed", type=_seed)

    sub = command("realize", cmd_realize, "Sample the long-range links of an architecture")
    sub.add_argument("--arch", required=True)
    sub.add_argument("--seed", type=_seed, required=True)
    sub.add_argument("--out")

    sub = command("simulate-sv", cmd_simulate_sv, "Mean singular values of (w + m/2, w) Gaussian matrices")
    sub.add_argument("--width", type=int, required=True)
    sub.add_argument("--mass", required=True, help="begin:end:step, end exclusive")
    sub.add_argument("--trials", type=int, required=True)
    sub.add_argument("--variance", type=float, default=1.0)
    sub.add_argument("--seed", type=_seed, required=True)
    sub.add_argument("--jobs", type=int, default=1)
    sub.add_argument("--out", required=True)

    sub = command("gen-data", cmd_gen_data, "Generate a Seg-n or Circle-n dataset as CSV")
    sub.add_argument("--kind", choices=("seg", "circle"), required=True)
    sub.add_argument("--n", type=int, default=20)
    sub.add_argument("--samples", type=int, default=datasets.TRAIN_SAMPLES)
    sub.add_argument("--seed", type=_seed, required=True)
    sub.add_argument("--out", required=True)

    sub = command("load-idx", cmd_load_idx, "Parse an IDX image/label pair")
    sub.add_argument("--images", required=True)
    sub.add_argument("--labels", required=True)
    sub.add_argument("--out")

    train_defaults = network.TrainConfig()
    sub = command("train", cmd_train, "Train one architecture")
    sub.add_argument("--arch", required=True)
    sub.add_argument("--dataset", default="circle20", help='"seg<n>", "circle<n>" or "idx"')
    sub.add_argument("--train-samples", type=int, default=datasets.TRAIN_SAMPLES)
    sub.add_argument("--test-samples", type=int, default=datasets.TEST_SAMPLES)
    for name in ("--train-images", "--train-labels", "--test-images", "--test-labels"):
        sub.add_argument(name)
    sub.add_argument("--seed", type=_seed, required=True)
    sub.add_argument("--epochs", type=int, default=train_defaults.epochs)
    sub.add_argument("--batch-size", type=int, default=train_defaults.batch_size)
    sub.add_argument("--lr", type=float, default=train_defaults.lr0)
    sub.add_argument("--schedule", choices=("cosine", "constant"), default=train_defaults.schedule)
    sub.add_argument("--out")
    sub.add_argument("--checkpoint")

    sub = command("ldi", cmd_ldi, "Singular values of the initial layerwise Jacobians")
    sub.add_argument("--arch", required=True)
    sub.add_argument("--seed", type=_seed, required=True)
    sub.add_argument("--probes", type=int, default=16)

    sub = command("sweep", cmd_sweep, "Train a grid of architectures")
    sub.add_argument("--grid", required=True)
    sub.add_argument("--seed", type=_seed, required=True)
    sub.add_argument("--jobs", type=int, default=1)
    sub.add_argument("--out", required=True)

    columns = ("nn_mass", "nn_density", "param_count", "flop_count", "test_acc", "train_loss", "mean_init_sv")
    sub = command("fit", cmd_fit, "Least squares fit over a sweep CSV")
    sub.add_argument("--csv", required=True)
    sub.add_argument("--x", choices=columns, default="nn_mass")
    sub.add_argument("--y", choices=columns, default="test_acc")
    sub.add_argument("--log", action="store_true", help="Fit against log(x)")
    sub.add_argument("--per-repeat", action="store_true")

    for name, handler, help_text in (("design", cmd_design, "Find shortcut budgets for a target NN-Mass"),
                                     ("compress", cmd_compress, "Design a smaller model of comparable NN-Mass")):
        sub = command(name, handler, help_text)
        if name == "design":
            sub.add_argument("--target-mass", type=float, required=True)
            sub.add_argument("--input-dim", type=int, default=2)
            sub.add_argument("--output-dim", type=int, default=2)
            sub.add_argument("--activation", choices=[a.value for a in topology.Activation], default="elu")
        else:
            sub.add_argument("--arch", required=True)
        sub.add_argument("--cells", type=_cells, required=True, help="DEPTHxWIDTH,...")
        sub.add_argument("--tol", type=float, default=0.05)
        sub.add_argument("--max-params", type=int)
        sub.add_argument("--method", choices=("auto", "binary", "greedy", "exhaustive"), default="auto")

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(stream=sys.stderr, level=args.log_level,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", force=True)

    try:
        logger.debug("Running %s", args.command)
        args.handler(args)
    except NNMassError as e:
        sys.stderr.write(json.dumps(e.to_dict(), sort_keys=True) + "\n")
        return 1
    except json.JSONDecodeError as e:
        sys.stderr.write(json.dumps({"code": "format", "message": str(e), "context": {"line": e.lineno}}) + "\n")
        return 1
    except OSError as e:
        sys.stderr.write(json.dumps({"code": "io", "message": str(e), "context": {"path": e.filename}}) + "\n")
        return 1
    return 0
