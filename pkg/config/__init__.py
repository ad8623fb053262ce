# Settings and run-config handling
