from cgh.cli import main

main()
