import sys

from dentmesh import run

if __name__ == '__main__':
    sys.exit(run.main())
