from lasg.cli import main
import sys

sys.exit(main())
