"""
Progress-bar switch shared by every tqdm call.
"""


def bar_disabled(wanted: bool) -> bool | None:
    """
    tqdm ``disable`` value: True when no bar is wanted, otherwise None, which
    lets tqdm drop the bar when stderr is not a terminal (pipes, captured output).
    """
    return None if wanted else True
