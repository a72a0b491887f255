"""Versioned English function-word stoplist for the fallback answer extractor.

Bump STOPLIST_VERSION whenever FUNCTION_WORDS changes; golden generation
tests pin their expectations to a specific version.
"""

STOPLIST_VERSION = 1

FUNCTION_WORDS = frozenset(
    """
    i me my myself we our ours ourselves you your yours yourself yourselves
    he him his himself she her hers herself it its itself they them their
    theirs themselves what which who whom this that these those am is are
    was were be been being have has had having do does did doing would
    should could ought a an the and but if or because as until while of at
    by for with about against between into through during before after
    above below to from up down in out on off over under again further
    then once here there when where why how all any both each few more
    most other some such no nor not only own same so than too very s t d
    ll m re ve can will just don won shan shouldn wouldn couldn mustn
    needn aren isn wasn weren hasn hadn haven didn doesn ain y o ma now
    """.split()
)
