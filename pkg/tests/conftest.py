from dataclasses import replace

from coopball.board import ActionPair, BoardState, Trajectory, TrajectoryRecord


def make_trajectory(points, sample_time=0.05, velocities=None,
                    human_actions=None, robot_actions=None,
                    termination="episode_end"):
    """Synthetic trajectory visiting the given (x, y) points in order."""
    points = list(points)
    n = len(points)
    if n == 0:
        empty = BoardState(x=0.0, y=0.0, vx=0.0, vy=0.0, roll=0.0,
                           pitch=0.0, terminated=termination)
        return Trajectory(records=(), termination=termination,
                          final_state=empty, sample_time=sample_time)
    velocities = velocities or [(0.0, 0.0)] * n
    human_actions = human_actions or [(0.0, 0.0)] * n
    robot_actions = robot_actions or [(0.0, 0.0)] * n
    records = tuple(
        TrajectoryRecord(
            step_index=i,
            state=BoardState(x=p[0], y=p[1], vx=v[0], vy=v[1],
                             roll=0.0, pitch=0.0, step_index=i),
            actions=ActionPair(human=tuple(h), robot=tuple(r)),
        )
        for i, (p, v, h, r) in enumerate(
            zip(points, velocities, human_actions, robot_actions)))
    final = replace(records[-1].state, step_index=n, terminated=termination)
    return Trajectory(records=records, termination=termination,
                      final_state=final, sample_time=sample_time)


def parked_trajectory(x, y, steps, sample_time=0.05):
    return make_trajectory([(x, y)] * steps, sample_time=sample_time)
