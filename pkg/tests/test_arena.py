import numpy as np
import pytest

from masquad import arena
from masquad.arena import (
    DEFAULT_STATS,
    K_INTR,
    NOOP,
    STOP,
    ArenaError,
    ScenarioConfig,
    ScenarioFormatError,
    UnitSpec,
    UnitTypeStats,
    available_actions,
    chebyshev,
    encode_state,
    enemy_policy,
    expert_policy,
    insert_unit,
    make_scenario,
    reset,
    scenario_from_text,
    scenario_to_text,
    step,
    terminal,
    visibility,
)


def world(allies, enemies, width=16, height=16, stats=None, seed=0, max_steps=60):
    cfg = ScenarioConfig(
        scenario_id="test",
        allies=tuple(UnitSpec(t, c) for t, c in allies),
        enemies=tuple(UnitSpec(t, c) for t, c in enemies),
        width=width, height=height, seed=seed, max_steps=max_steps,
        stats=dict(stats or DEFAULT_STATS),
    )
    return reset(cfg)


def stop_all(w):
    return {i: STOP for i in range(w.n_units) if w.alive[i]}


class TestReset:
    def test_one_v_one(self):
        w = world([("fighter", (0, 0))], [("fighter", (5, 5))])
        assert w.n_units == 2
        assert w.alive.all()
        assert w.t == 0
        assert np.array_equal(w.hp, [10.0, 10.0])
        assert (w.cooldown == 0).all()

    def test_seed_determinism(self):
        cfg = make_scenario("j", "3f", "3f", spawn_jitter=2).with_seed(123)
        w1, w2 = reset(cfg), reset(cfg)
        assert np.array_equal(w1.x, w2.x) and np.array_equal(w1.y, w2.y)

    def test_8v9_counts(self):
        cfg = make_scenario("8v9f", "8f", "9f")
        w = reset(cfg)
        assert w.n_units == 17
        assert int(w.team.sum()) == 8

    def test_zero_jitter_places_on_spawn_cells(self):
        w = world([("fighter", (2, 3))], [("fighter", (9, 9))])
        assert (int(w.x[0]), int(w.y[0])) == (2, 3)

    def test_invalid_configs(self):
        with pytest.raises(ArenaError):
            world([], [("fighter", (0, 0))])
        with pytest.raises(ArenaError):
            world([("fighter", (0, 0))], [("fighter", (0, 0))])  # duplicate cell
        with pytest.raises(ArenaError):
            world([("fighter", (99, 0))], [("fighter", (0, 0))])


class TestAvailability:
    def test_corner_blocks_two_moves(self):
        w = world([("fighter", (0, 0))], [("fighter", (9, 9))])
        avail = available_actions(w, 0)
        moves = avail[2:6]
        assert moves.sum() == 2  # N and E only from the SW corner
        assert avail[2] and avail[3] and not avail[4] and not avail[5]

    def test_dead_unit_noop_only(self):
        w = world([("fighter", (0, 0))], [("fighter", (9, 9))])
        w.alive[0] = False
        avail = available_actions(w, 0)
        assert avail[NOOP] and avail.sum() == 1

    def test_attack_range_chebyshev(self):
        w = world([("fighter", (0, 0))], [("fighter", (0, 2))])
        assert available_actions(w, 0)[K_INTR + 1]  # distance 2, range 2
        w3 = world([("fighter", (0, 0))], [("fighter", (0, 3))])
        assert not available_actions(w3, 0)[K_INTR + 1]

    def test_noop_unavailable_to_living(self):
        w = world([("fighter", (0, 0))], [("fighter", (9, 9))])
        assert not available_actions(w, 0)[NOOP]

    def test_healer_cannot_attack_and_heals_allies_only(self):
        w = world([("healer", (0, 0)), ("fighter", (0, 1))], [("fighter", (0, 2))])
        avail = available_actions(w, 0)
        assert not avail[K_INTR + 2]   # enemy in range 2 <= 3 but healers do no damage
        assert avail[K_INTR + 1]       # ally in heal range
        assert not avail[K_INTR + 0]   # no self-heal

    def test_occupied_cell_blocks_move(self):
        w = world([("fighter", (0, 0)), ("fighter", (1, 0))], [("fighter", (9, 9))])
        avail = available_actions(w, 0)
        assert not avail[3]  # east into the teammate


class TestStep:
    def test_all_stop_only_cooldowns_change(self):
        w = world([("fighter", (0, 0))], [("fighter", (9, 9))])
        w.cooldown[0] = 1
        w2, _ = step(w, stop_all(w))
        assert np.array_equal(w2.x, w.x) and np.array_equal(w2.y, w.y)
        assert np.array_equal(w2.hp, w.hp)
        assert w2.cooldown[0] == 0 and w2.t == 1

    def test_attack_arithmetic(self):
        w = world([("fighter", (0, 0))], [("fighter", (0, 2))])
        w.hp[1] = 5.0
        w2, _ = step(w, {0: K_INTR + 1, 1: STOP})
        assert w2.hp[1] == 2.0
        assert w2.cooldown[0] == 1
        assert w2.alive[1]

    def test_simultaneous_focus_fire_kill(self):
        w = world([("fighter", (0, 0)), ("fighter", (0, 4))], [("fighter", (0, 2))])
        w.hp[2] = 5.0
        w2, events = step(w, {0: K_INTR + 2, 1: K_INTR + 2, 2: K_INTR + 0})
        assert w2.hp[2] == 0.0 and not w2.alive[2]
        assert w2.cooldown[0] == 1 and w2.cooldown[1] == 1
        # the dying unit's simultaneous attack still landed
        assert w2.hp[0] == 7.0
        assert ("death", 2) in events

    def test_move_collision_becomes_stop(self):
        # both units step toward the same empty cell; lower index wins
        w = world([("fighter", (0, 0)), ("fighter", (2, 0))], [("fighter", (9, 9))])
        w2, events = step(w, {0: 3, 1: 5, 2: STOP})  # 0 east, 1 west -> both want (1,0)
        assert (int(w2.x[0]), int(w2.y[0])) == (1, 0)
        assert (int(w2.x[1]), int(w2.y[1])) == (2, 0)
        assert ("blocked", 1, (1, 0)) in events

    def test_move_into_currently_occupied_cell_unavailable(self):
        # availability is judged pre-step, so following a vacating unit is
        # not a legal submission even though resolution could have allowed it
        w = world([("fighter", (0, 0)), ("fighter", (1, 0))], [("fighter", (9, 9))])
        assert not available_actions(w, 0)[3]
        with pytest.raises(ArenaError):
            step(w, {0: 3, 1: 3, 2: STOP})

    def test_heal_and_clamp(self):
        w = world([("healer", (0, 0)), ("fighter", (0, 1))], [("fighter", (9, 9))])
        w.hp[1] = 9.0
        w2, _ = step(w, {0: K_INTR + 1, 1: STOP, 2: STOP})
        assert w2.hp[1] == 10.0  # clamped at max_hp

    def test_unavailable_action_is_harness_bug(self):
        w = world([("fighter", (0, 0))], [("fighter", (9, 9))])
        with pytest.raises(ArenaError):
            step(w, {0: K_INTR + 1, 1: STOP})  # out-of-range attack

    def test_missing_action_for_living_unit(self):
        w = world([("fighter", (0, 0))], [("fighter", (9, 9))])
        with pytest.raises(ArenaError):
            step(w, {0: STOP})


class TestVisibility:
    def test_sight_zero_sees_self_only(self):
        stats = dict(DEFAULT_STATS)
        stats["fighter"] = UnitTypeStats(10, 3, 0, 2, 0, 1)
        w = world([("fighter", (0, 0))], [("fighter", (0, 1))], stats=stats)
        vis = visibility(w)
        assert vis[0, 0] and not vis[0, 1]

    def test_huge_sight_sees_all_living(self):
        stats = dict(DEFAULT_STATS)
        stats["fighter"] = UnitTypeStats(10, 3, 0, 2, 99, 1)
        w = world([("fighter", (0, 0))], [("fighter", (15, 15)), ("fighter", (3, 12))],
                  stats=stats)
        assert visibility(w)[0].all()

    def test_chebyshev_thresholds(self):
        stats = dict(DEFAULT_STATS)
        stats["fighter"] = UnitTypeStats(10, 3, 0, 2, 4, 1)
        w = world([("fighter", (0, 0))], [("fighter", (3, 3)), ("fighter", (9, 9))],
                  stats=stats)
        vis = visibility(w)
        assert vis[0, 0] and vis[0, 1] and not vis[0, 2]

    def test_dead_observer_sees_only_itself(self):
        w = world([("fighter", (0, 0))], [("fighter", (0, 1))])
        w.alive[0] = False
        vis = visibility(w)
        assert vis[0, 0] and not vis[0, 1]
        assert not vis[1, 0]  # dead units are invisible to others


class TestTerminal:
    def test_win(self):
        w = world([("fighter", (0, 0))], [("fighter", (9, 9))])
        w.alive[1] = False
        assert terminal(w) == "win"

    def test_draw_at_max_steps(self):
        w = world([("fighter", (0, 0))], [("fighter", (9, 9))], max_steps=5)
        w.t = 5
        assert terminal(w) == "draw"

    def test_simultaneous_wipe_is_loss(self):
        w = world([("fighter", (0, 0))], [("fighter", (9, 9))])
        w.alive[:] = False
        assert terminal(w) == "loss"

    def test_ongoing(self):
        w = world([("fighter", (0, 0))], [("fighter", (9, 9))])
        assert terminal(w) == "ongoing"


class TestExpertPolicy:
    def test_attacks_adjacent_enemy(self):
        w = world([("fighter", (2, 2))], [("fighter", (2, 3))])
        assert expert_policy(w, 0) == K_INTR + 1

    def test_focus_fires_lowest_hp(self):
        w = world([("fighter", (2, 2))], [("fighter", (2, 3)), ("fighter", (3, 2))])
        w.hp[2] = 4.0
        assert expert_policy(w, 0) == K_INTR + 2

    def test_stops_without_visible_enemy(self):
        w = world([("fighter", (0, 0))], [("fighter", (15, 15))])
        assert expert_policy(w, 0) == STOP

    def test_kites_on_cooldown_5x5_trace(self):
        # 5x5 board, enemy at Chebyshev 1, our cooldown 2: rule 3 moves away.
        w = world([("fighter", (2, 2))], [("fighter", (2, 3))], width=5, height=5)
        w.cooldown[0] = 2
        a = expert_policy(w, 0)
        assert a == 4  # south, from 2 -> distance 2; N/E/W all tie at 1 or less
        w2, _ = step(w, {0: a, 1: enemy_policy(w, 1)})
        assert chebyshev(w2, 0)[1] > 1

    def test_partner_is_the_nearest_target_script(self):
        # external partner attacks nearest, not lowest hp, and never kites
        w = world([("fighter", (2, 2))], [("fighter", (2, 3)), ("fighter", (2, 4))],
                  width=5, height=5)
        w.hp[2] = 1.0
        assert expert_policy(w, 0) == K_INTR + 2      # focus the wounded one
        assert arena.partner_policy(w, 0) == K_INTR + 1  # partner takes the nearest
        w.cooldown[0] = 2
        assert expert_policy(w, 0) == 4               # expert kites south
        assert arena.partner_policy(w, 0) != 4        # partner does not

    def test_healer_heals_lowest_hp_wounded(self):
        w = world([("healer", (2, 2)), ("fighter", (2, 3)), ("fighter", (3, 2))],
                  [("fighter", (9, 9))])
        w.hp[1] = 6.0
        w.hp[2] = 3.0
        assert expert_policy(w, 0) == K_INTR + 2

    def test_approaches_visible_enemy(self):
        w = world([("fighter", (2, 2))], [("fighter", (7, 2))])
        a = expert_policy(w, 0)
        assert a == 3  # east, closing distance


class TestEnemyPolicy:
    def test_attacks_nearest_in_range(self):
        w = world([("fighter", (2, 3)), ("fighter", (2, 4))], [("fighter", (2, 2))])
        w.hp[1] = 1.0  # nearest beats lowest-hp for the scripted opponent
        assert enemy_policy(w, 2) == K_INTR + 0

    def test_stops_when_blind(self):
        w = world([("fighter", (0, 0))], [("fighter", (15, 15))])
        assert enemy_policy(w, 1) == STOP

    def test_approach_trace(self):
        w = world([("fighter", (2, 2))], [("fighter", (7, 2))])
        d0 = chebyshev(w, 1)[0]
        a = enemy_policy(w, 1)
        w2, _ = step(w, {0: STOP, 1: a})
        assert chebyshev(w2, 1)[0] == d0 - 1


class TestInsertUnit:
    def test_insert_into_free_corner(self):
        w = world([("fighter", (2, 2))], [("fighter", (9, 9))])
        w2 = insert_unit(w, "fighter", True, (0, 0))
        assert w2.n_units == 3
        assert w2.alive[2] and w2.team[2]
        assert w2.hp[2] == 10.0
        assert w.n_units == 2  # original untouched

    def test_insert_onto_occupied_cell_errors(self):
        w = world([("fighter", (2, 2))], [("fighter", (9, 9))])
        with pytest.raises(ArenaError):
            insert_unit(w, "fighter", True, (2, 2))

    def test_insert_out_of_bounds_errors(self):
        w = world([("fighter", (2, 2))], [("fighter", (9, 9))])
        with pytest.raises(ArenaError):
            insert_unit(w, "fighter", True, (16, 0))


class TestEncodeState:
    def test_shape_and_static_fields(self):
        w = world([("healer", (0, 0))], [("tank", (15, 15))])
        s = encode_state(w)
        assert s.shape == (2, 17)
        assert s[0, 0] == 1.0 and s[1, 0] == 0.0          # ally flag
        assert s[0, 3] == 1.0 and s[1, 4] == 1.0          # type one-hot
        assert s[1, 6] == 1.0 and s[1, 7] == 1.0          # normalized position
        assert s[0, 8] == 1.0                              # full hp fraction

    def test_dead_unit_zeroed_dynamics(self):
        w = world([("fighter", (3, 3))], [("fighter", (9, 9))])
        w.alive[0] = False
        s = encode_state(w)
        assert s[0, 0] == 1.0 and s[0, 2] == 1.0  # team/type retained
        assert (s[0, [1, 6, 7, 8, 9, 16]] == 0).all()

    def test_last_action_features(self):
        w = world([("fighter", (3, 3))], [("fighter", (3, 4))])
        w2, _ = step(w, {0: K_INTR + 1, 1: 2})
        s = encode_state(w2)
        assert s[0, 16] == 1.0 and s[0, 10:16].sum() == 0.0
        assert s[1, 12] == 1.0 and s[1, 16] == 0.0  # move N one-hot


class TestDeterminismAndInvariants:
    def test_identical_rollouts_bit_identical(self):
        cfg = make_scenario("3v3f", "3f", "3f").with_seed(7)
        def roll():
            w = reset(cfg)
            states = []
            for _ in range(20):
                acts = {}
                for i in range(w.n_units):
                    if w.alive[i]:
                        acts[i] = expert_policy(w, i) if w.team[i] else enemy_policy(w, i)
                w, _ = step(w, acts)
                states.append(encode_state(w))
                if terminal(w) != "ongoing":
                    break
            return np.concatenate(states)
        assert np.array_equal(roll(), roll())

    def test_random_action_fuzz_invariants(self):
        rng = np.random.default_rng(0)
        cfg = make_scenario("fuzz", "2f1h", "2f1t", spawn_jitter=2)
        steps_done = 0
        for trial in range(30):
            w = reset(cfg.with_seed(trial))
            prev = w
            while terminal(w) == "ongoing" and steps_done < 1500:
                acts = {}
                for i in range(w.n_units):
                    if w.alive[i]:
                        avail = available_actions(w, i)
                        acts[i] = int(rng.choice(np.flatnonzero(avail)))
                w, events = step(w, acts)
                steps_done += 1
                # occupancy: one living unit per cell
                cells = {(int(w.x[i]), int(w.y[i])) for i in range(w.n_units) if w.alive[i]}
                assert len(cells) == int(w.alive.sum())
                # hp moves only through recorded attack/heal events
                delta = w.hp - prev.hp
                gained = {e[2] for e in events if e[0] == "heal"}
                lost = {e[2] for e in events if e[0] == "attack"}
                for i in range(w.n_units):
                    if delta[i] > 0:
                        assert i in gained
                    if delta[i] < 0:
                        assert i in lost
                assert not w.alive[~prev.alive].any()  # no resurrection
                prev = w


class TestScenarioFiles:
    def test_round_trip(self):
        cfg = make_scenario("2f1h_v_3f", "2f1h", "3f")
        text = scenario_to_text(cfg)
        back = scenario_from_text(text)
        assert back == cfg

    def test_parse_errors(self):
        with pytest.raises(ScenarioFormatError):
            scenario_from_text("id x\nally fighter 0 0\nenemy fighter 1 1\n")  # no schema
        with pytest.raises(ScenarioFormatError):
            scenario_from_text("schema 99\nid x\n")
        with pytest.raises(ScenarioFormatError):
            scenario_from_text("schema 1\nid x\nally fighter zero 0\n")

    def test_registry_sizes(self):
        assert len(arena.training_scenarios()) == 8
        assert len(arena.heldout_scenarios()) == 20
        held_n = [c.n_units for c in arena.heldout_scenarios()]
        assert max(held_n) == 19
        for cfg in arena.training_scenarios() + arena.heldout_scenarios():
            cfg.validate()
