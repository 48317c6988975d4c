"""The ``elp`` command line: corpus generation, training, inference,
evaluation, ablations and gradient checks.

Every command takes an optional JSON config file (``--config``) and
``--section.key VALUE`` overrides; ``ELP_SEED`` overrides the seed.
"""

import logging
import sys

from elplab import experiment
from elplab.config import resolve_config
from elplab.errors import ElpError
from elplab.program import Program
from elplab.utils import version

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(levelname)s %(name)s: %(message)s"

program = Program(
    "elp",
    version=version(),
    description="Emotion-conditioned listener motion laboratory.",
)
program.option(
    "-V",
    "--verbose",
    action="count",
    default=0,
    help="more log output (-V info, -VV debug)",
)


@program.command("gen-data")
def gen_data(config=None, overrides=None):
    """Generate the synthetic conversation corpus.

    Writes ``<corpus_dir>/{train,val,test}/clip_<id>.txt``, ``manifest.json``
    and the resolved ``config.json``.

    Parameters
    ----------
    config : str
        JSON config file; absent keys keep their defaults.
    """
    cfg = resolve_config(config, overrides)
    manifest = experiment.run_gen_data(cfg)
    return f"wrote {manifest}"


@program.command("train")
def train(config=None, overrides=None):
    """Train the listener model on the training split.

    Writes ``model.ckpt``, ``loss.csv`` and ``val_loss.csv`` into the output
    directory.

    Parameters
    ----------
    config : str
        JSON config file; absent keys keep their defaults.
    """
    cfg = resolve_config(config, overrides)
    result = experiment.run_train(cfg)
    first, last = result.losses[0][-1], result.losses[-1][-1]
    return f"trained {len(result.losses)} steps, L_total {first:.6g} -> {last:.6g}"


@program.command("infer")
def infer(clip, checkpoint=None, emotion=None, config=None, overrides=None):
    """Decode the listener of one clip.

    Writes ``prediction.txt``, the blink-composited ``prediction_blink.txt``
    (both in clip format) and ``codewords.csv``.

    Parameters
    ----------
    clip : str
        Clip file whose speaker drives the listener.
    checkpoint : str
        Model checkpoint; defaults to ``<output>/model.ckpt``.
    emotion : str
        Emotion override, a slot index or a name such as ``negative``;
        without it the classifier decides.
    config : str
        JSON config file; absent keys keep their defaults.
    """
    cfg = resolve_config(config, overrides)
    pred = experiment.run_infer(cfg, clip, checkpoint, emotion)
    return f"decoded with emotion slot {pred.gate_slot}"


@program.command("eval")
def evaluate(checkpoint=None, config=None, overrides=None):
    """Score the model, the ground truth and the baselines on the test split.

    Writes ``report.csv`` and ``report.json``. Baselines are chosen with
    ``--eval.baselines``.

    Parameters
    ----------
    checkpoint : str
        Model checkpoint; defaults to ``<output>/model.ckpt``.
    config : str
        JSON config file; absent keys keep their defaults.
    """
    cfg = resolve_config(config, overrides)
    reports = experiment.run_eval(cfg, checkpoint)
    return "\n".join(f"{name}: fd_beta {r.groups['beta'].fd:.6g}" for name, r in reports.items())


@program.command("ablate")
@program.arg("mode", choices=("space", "heads"), help="space: U vs V twins; heads: H sweep")
def ablate(mode, config=None, overrides=None):
    """Train ablation variants and compare them.

    Parameters
    ----------
    mode : str
        Which ablation to run.
    config : str
        JSON config file; absent keys keep their defaults.
    """
    cfg = resolve_config(config, overrides)
    rows = experiment.run_ablate(cfg, mode)
    return "\n".join(f"{row[0]}: separation {row[1 if mode == 'space' else 2]:.6g}" for row in rows)


@program.command("gradcheck")
def gradcheck(config=None, overrides=None):
    """Compare analytic gradients with central differences on a reduced model.

    Writes ``gradcheck.csv``; fails when any component reaches a relative
    error of 1e-3.

    Parameters
    ----------
    config : str
        JSON config file; absent keys keep their defaults.
    """
    cfg = resolve_config(config, overrides)
    rows = experiment.run_gradcheck(cfg)
    return "\n".join(f"{name:<32} {err:.3e}" for name, err in rows)


def setup_logging(verbosity):
    level = (logging.WARNING, logging.INFO, logging.DEBUG)[min(verbosity, 2)]
    root = logging.getLogger("elplab")
    root.handlers.clear()
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root.addHandler(handler)
    root.setLevel(level)


def main(argv=None):
    """Run one command; returns the process exit code."""
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        command, real_args = program.parse(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    setup_logging(program.verbose)
    try:
        message = command(*real_args)
    except ElpError as exc:
        logger.error("%s", exc)
        return 1
    if message:
        print(message)
    return 0


if __name__ == "__main__":
    sys.exit(main())
