"""Command line tools: mrpcd, mrpcctl, mrpc-schemac, mrpc-bench."""
