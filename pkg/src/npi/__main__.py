from npi.cli import main

raise SystemExit(main())
