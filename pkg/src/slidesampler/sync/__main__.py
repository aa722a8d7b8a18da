from .mockserver import main

main()
