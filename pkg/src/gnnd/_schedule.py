"""Round-robin pairing: partition all unordered pairs into disjoint rounds."""


def round_robin(count):
    """Rounds of pairs ``(i, j)``, ``i < j``, covering every pair of ``range(count)`` once.

    No index appears twice within a round (circle method).
    """
    if count < 2:
        return []
    players = list(range(count))
    if count % 2:
        players.append(None)
    m = len(players)
    rounds = []
    for _ in range(m - 1):
        rnd = []
        for i in range(m // 2):
            a, b = players[i], players[m - 1 - i]
            if a is not None and b is not None:
                rnd.append((min(a, b), max(a, b)))
        rounds.append(sorted(rnd))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds
