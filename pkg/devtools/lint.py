import argparse
import subprocess

from funlog import log_calls
from rich import get_console, reconfigure
from rich import print as rprint

# Update as needed.
SRC_PATHS = ["src", "tests", "devtools"]
DOC_PATHS = ["README.md", "development.md", "installation.md", "DESIGN.md"]


reconfigure(emoji=not get_console().options.legacy_windows)  # No emojis on legacy windows.


def main():
    parser = argparse.ArgumentParser(description="Spell check, lint, format and type check.")
    parser.add_argument(
        "--check",
        action="store_true",
        help="Report problems without rewriting files (for CI)",
    )
    args = parser.parse_args()

    rprint()

    steps = [
        ["codespell", *([] if args.check else ["--write-changes"]), *SRC_PATHS, *DOC_PATHS],
        ["ruff", "check", *([] if args.check else ["--fix"]), *SRC_PATHS],
        ["ruff", "format", *(["--check"] if args.check else []), *SRC_PATHS],
        ["basedpyright", "--stats", *SRC_PATHS],
    ]
    errcount = sum(run(cmd) for cmd in steps)

    rprint()

    if errcount != 0:
        rprint(f"[bold red]:x: Lint failed in {errcount} of {len(steps)} steps.[/bold red]")
    else:
        rprint("[bold green]:white_check_mark: Lint passed![/bold green]")
    rprint()

    return errcount


@log_calls(level="warning", show_timing_only=True)
def run(cmd: list[str]) -> int:
    rprint()
    rprint(f"[bold green]>> {' '.join(cmd)}[/bold green]")
    try:
        subprocess.run(cmd, text=True, check=True)
    except KeyboardInterrupt:
        rprint("[yellow]Keyboard interrupt - Cancelled[/yellow]")
        return 1
    except subprocess.CalledProcessError as e:
        rprint(f"[bold red]Error: {e}[/bold red]")
        return 1
    return 0


if __name__ == "__main__":
    exit(main())
