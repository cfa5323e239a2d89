"""Task-adaptive parameter sharing on a small numpy autodiff engine."""
