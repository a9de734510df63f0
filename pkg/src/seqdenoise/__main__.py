from seqdenoise.cli import main

main()
