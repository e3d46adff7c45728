import sys

from authority_lock.cli import main

if __name__ == '__main__':
    sys.exit(main())
