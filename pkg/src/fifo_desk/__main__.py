"""Entry point for running fifo-desk as a module."""

from fifo_desk import main

if __name__ == "__main__":
    main()
