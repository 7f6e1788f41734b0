from cmpocl.cli import main
raise SystemExit(main())
