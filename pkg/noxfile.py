import os
import shutil
from pathlib import Path

import nox

package = "pfmsoft_minformer"
github_user = "DonalChilde"

# Empty list means no default sessions
nox.options.sessions = []


@nox.session(tags=["fix"])
def ruff(session: nox.Session) -> None:
    """
    run ruff format and the ruff linter on code
    """
    session.install("ruff")
    session.run("ruff", "format", "src", "tests")
    session.run("ruff", "check", "--fix", "src", "tests")


@nox.session(tags=["check"])
def mypy(session: nox.Session) -> None:
    """
    type check the package
    """
    session.install(".", "mypy", "types-PyYAML")
    session.run("mypy", "src")


@nox.session()
def tests(session: nox.Session):
    session.install(".[testing]")
    session.run("pytest", *session.posargs)


@nox.session(name="tests-slow")
def tests_slow(session: nox.Session):
    """Full gradient sweeps, process-pool sweeps and the official MNIST files."""
    session.install(".[testing]")
    session.run("pytest", "--runslow", *session.posargs)


# It's a good idea to keep your dev session out of the default list
# so it's not run twice accidentally
@nox.session(default=False)
def dev(session: nox.Session) -> None:
    """
    Set up a python development environment for the project at ".venv".
    """

    venv_dir = Path(".venv")
    if venv_dir.exists():
        shutil.rmtree(venv_dir)

    session.run("venv", ".venv", silent=True)
    session.run(".venv/bin/pip", "install", "-U", "pip", "wheel")

    # Use the venv's interpreter to install the project along with
    # all it's dev dependencies, this ensures it's installed in the right way
    session.run(".venv/bin/pip", "install", "-e", ".[testing]", "--group", "dev", "--group", "doc")


@nox.session(name="docs-build")
def docs_build(session: nox.Session) -> None:
    """Build the documentation."""
    args = session.posargs or ["docs/source", "docs/build"]
    if not session.posargs and "FORCE_COLOR" in os.environ:
        args.insert(0, "--color")

    session.install(".", "Sphinx", "sphinx-autodoc-typehints", "sphinx_rtd_theme", "myst-parser", "sphinxcontrib-typer")

    build_dir = Path("docs", "build")
    if build_dir.exists():
        shutil.rmtree(build_dir)

    session.run("sphinx-build", *args)
