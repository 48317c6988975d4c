"""Decorator-driven argparse front end.

Plain functions become sub-commands with ``@program.command(name)``: their
signature supplies positionals (no default) and options (with default), and
their numpy-style docstring supplies the help text. A command with an
``overrides`` parameter also accepts one ``--section.key VALUE`` flag per
leaf of :class:`~elplab.config.ExperimentConfig`; the flags actually given
reach the command as a dict of raw strings.
"""

from contextlib import suppress

with suppress(ImportError):
    import argcomplete
import argparse
import inspect

from docstring_parser import parse as ds_parse

from elplab.config import ExperimentConfig, flatten

_POSITIONAL = type("_positional", (object,), {})
_DISPATCH_TO = "_dispatch_to"
_OVERRIDE = "override:"
OVERRIDES_PARAM = "overrides"


def docstring(dstr):
    """Short help, long description and per-parameter help of a docstring.

    Returns
    -------
    tup :
        ``(parsed_docstring, {param_name: help_text})``.
    """
    doc = ds_parse(dstr)
    if not doc.long_description:
        doc.long_description = doc.short_description
    helps = {p.arg_name.replace("-", "_").lstrip("_"): p.description for p in doc.params}
    return doc, helps


def purify_kwargs(kwargs):
    """Drop ``type``/``metavar`` entries that are None."""
    return {k: v for k, v in kwargs.items() if not (k in ("type", "metavar") and v is None)}


def action_by_type(obj):
    """argparse ``action``/``type`` keywords for an option default."""
    if isinstance(obj, bool):
        return {"action": "store_false" if obj else "store_true"}
    if isinstance(obj, list):
        return {"action": "append"}
    if type(obj) in (int, float, str):
        return {"type": type(obj)}
    return {}


def ensure_dashes(opts):
    """``x`` -> ``-x`` and ``name`` -> ``--name``; dashed options pass through."""
    for opt in opts:
        if opt.startswith("-"):
            yield opt
        else:
            yield ("-" if len(opt) == 1 else "--") + opt.replace("_", "-")


def merge(name, default, override, help_text):
    """Positional names and ``add_argument`` keywords for one parameter."""
    kwargs = {"help": help_text}
    if isinstance(default, _POSITIONAL):
        opts = [name]
    else:
        opts = list(ensure_dashes([name]))
        kwargs.update({"default": default, "dest": name})
        kwargs.update(action_by_type(default))
    kwargs.update(override[1])
    return list(override[0]) or opts, kwargs


def _metavar(value):
    if isinstance(value, bool):
        return "BOOL"
    if isinstance(value, tuple):
        return "LIST"
    return type(value).__name__.upper()


def _text(value):
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value).lower() if isinstance(value, bool) else str(value)


class Program:
    """An argparse root whose sub-commands are generated from functions."""

    def __init__(self, prog=None, version=None, **kwargs):
        self.parser = argparse.ArgumentParser(prog, **kwargs)
        if version is not None:
            self.parser.add_argument("--version", action="version", version=version)
        self._subparsers = self.parser.add_subparsers(metavar="COMMAND")
        self._signatures = {}
        self._options = None
        self._current_command = None

    def __getattr__(self, attr):
        # global options are looked up on the last parsed namespace
        if attr.startswith("_"):
            raise AttributeError(attr)
        return getattr(self._options, attr)

    @property
    def name(self):
        return self.parser.prog

    def option(self, *args, **kwd):
        """Add a global option, given before the sub-command."""
        if not (args and all(arg.startswith("-") for arg in args)):
            raise AssertionError("global options must be dashed")
        arg = self.parser.add_argument(*args, **kwd)
        if arg.dest in self.__dict__ or hasattr(type(self), arg.dest):
            raise AssertionError(f"Invalid option name: {arg.dest}")
        return arg

    def command(self, *args, **kwargs):
        """Decorator turning a function into a sub-command.

        Use as ``@command`` or ``@command("new-name")``.
        """
        if len(args) == 1 and callable(args[0]):
            return self._generate_command(args[0])

        def _command(func):
            return self._generate_command(func, *args, **kwargs)

        return _command

    @staticmethod
    def arg(param, *args, **kwargs):
        """Decorator overriding the ``add_argument`` call of one parameter."""

        def wrapper(func):
            if not hasattr(func, "argopts"):
                func.argopts = {}
            func.argopts[param] = (args, kwargs)
            return func

        return wrapper

    def _generate_command(self, func, name=None, **kwargs):
        name = name or func.__name__
        doc, helps = docstring(f"{(inspect.getdoc(func) or '').strip()}\n")
        subparser = self._subparsers.add_parser(
            name,
            help=doc.short_description or None,
            description=doc.long_description or None,
            **kwargs,
        )
        sig = inspect.signature(func)
        self._signatures[func.__name__] = sig
        overrides = getattr(func, "argopts", {})
        for pname, param in sig.parameters.items():
            if pname == OVERRIDES_PARAM:
                self._add_config_flags(subparser)
                continue
            default = param.default
            if default is sig.empty:
                default = _POSITIONAL()
            opts, kwds = merge(pname, default, overrides.get(pname, ((), {})), helps.get(pname))
            subparser.add_argument(*opts, **purify_kwargs(kwds))
        subparser.set_defaults(**{_DISPATCH_TO: func})
        return func

    @staticmethod
    def _add_config_flags(subparser):
        group = subparser.add_argument_group("configuration overrides")
        for key, value in flatten(ExperimentConfig()).items():
            group.add_argument(
                f"--{key}",
                dest=f"{_OVERRIDE}{key}",
                default=argparse.SUPPRESS,
                metavar=_metavar(value),
                help=f"default: {_text(value)}",
            )

    def parse(self, args):
        """Parse ``args`` into ``(command, positional_args)``."""
        with suppress(NameError):
            argcomplete.autocomplete(self.parser)

        self._options = self.parser.parse_args(args)
        arg_map = self._options.__dict__
        if _DISPATCH_TO not in arg_map:
            self.parser.error("a command is required")

        command = arg_map.pop(_DISPATCH_TO)
        given = {
            key[len(_OVERRIDE) :]: arg_map.pop(key)
            for key in list(arg_map)
            if key.startswith(_OVERRIDE)
        }
        real_args = []
        for pname in self._signatures[command.__name__].parameters:
            if pname == OVERRIDES_PARAM:
                real_args.append(given)
            else:
                real_args.append(arg_map.pop(pname))
        return command, real_args

    def execute(self, args):
        """Parse ``args`` and run the selected command; returns its result."""
        command, real_args = self.parse(args)
        self._current_command = command.__name__
        return command(*real_args)
