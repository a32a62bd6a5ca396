from iqa_forge.cli import main

main()
