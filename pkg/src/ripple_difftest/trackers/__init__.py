from .bugzilla import BugzillaTracker
from .github import GithubTracker
from .mock import MockTracker


def available_trackers() -> dict[str, type]:
    return {
        "github": GithubTracker,
        "bugzilla": BugzillaTracker,
        "mock": MockTracker,
    }
