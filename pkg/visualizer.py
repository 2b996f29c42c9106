from colorama import Fore, Style, init as colorama_init
import sys

colorama_init()


def highlight_text(text: str) -> None:
    border = "=" * (len(text) + 4)
    print(Fore.CYAN + border)
    print(f"| {text} |")
    print(border + Style.RESET_ALL)


def print_error(message: str) -> None:
    print(f"{Fore.RED}⚠ {message}{Style.RESET_ALL}", file=sys.stderr)


def print_success(message: str) -> None:
    print(f"{Fore.GREEN}✅ {message}{Style.RESET_ALL}")


def print_info(message: str) -> None:
    print(f"{Fore.YELLOW}➡️ {message}{Style.RESET_ALL}")


def progress_line(epoch: int, epochs: int, loss: float, lr: float) -> None:
    """Перезаписываемая строка прогресса эпох (как анимация загрузки в консоли)."""
    filled = int(20 * (epoch + 1) / max(epochs, 1))
    bar = "█" * filled + "·" * (20 - filled)
    end = "\n" if epoch + 1 >= epochs else "\r"
    print(f"🔥 [{bar}] эпоха {epoch + 1}/{epochs} | loss {loss:.4f} | lr {lr:.5f}", end=end)
