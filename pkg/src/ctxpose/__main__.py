from ctxpose.harness import main

raise SystemExit(main())
