from prcnn.cli import main

raise SystemExit(main())
