import sys

sys.stdin.readline()
print("not json")
