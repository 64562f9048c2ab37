//! ASCII renderings of greedy rollouts over a grid.
//!
//! Cell legend: `#` wall, `.` free, `S` start, `G` goal, `*` visited cell,
//! `@` the final cell of a truncated (looping) walk, `X` a coincident
//! start-and-goal. A trailer line states whether the walk reached a goal
//! and in how many moves.

use crate::scenario::{walk_greedy, Walk};
use decrl::env::{Cell, GridMdp, StateEncoding};
use decrl::policy::Actor;

/// Render the walk an actor takes from the start cell, greedily, for at
/// most `max_steps` moves.
pub fn render_trajectory(
    mdp: &GridMdp,
    enc: &StateEncoding,
    actor: &mut dyn Actor,
    max_steps: usize,
) -> String {
    assert!(max_steps >= 1, "rendering needs at least one step");
    render_walk(mdp, &walk_greedy(mdp, enc, actor, max_steps))
}

/// Render an already-computed walk.
pub fn render_walk(mdp: &GridMdp, walk: &Walk) -> String {
    let start = *walk.cells.first().expect("walks hold at least the start");
    let last = *walk.cells.last().expect("walks hold at least the start");
    let mut out = String::new();
    for row in 0..mdp.height() {
        let y = mdp.height() - 1 - row;
        for x in 0..mdp.width() {
            let cell = Cell::new(x, y);
            let ch = if cell == start && mdp.is_terminal(start) {
                'X'
            } else if !walk.reached_goal && cell == last {
                '@'
            } else if cell == start {
                'S'
            } else if mdp.is_terminal(cell) {
                'G'
            } else if mdp.is_wall(cell) {
                '#'
            } else if walk.cells.contains(&cell) {
                '*'
            } else {
                '.'
            };
            out.push(ch);
        }
        out.push('\n');
    }
    if walk.reached_goal {
        out.push_str(&format!("reached the goal in {} moves\n", walk.moves()));
    } else {
        out.push_str(&format!(
            "truncated after {} moves without reaching a goal (loop)\n",
            walk.moves()
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use decrl::env::{make_maze, value_iteration, GridMdpBuilder};
    use decrl::policy::{committed_optimal_policy, Policy, DEFAULT_TAU_FRACTION};

    const OPEN_5X5: &str = "\
S....
.....
.....
.....
....G";

    #[test]
    fn optimal_walk_on_an_open_grid_renders_an_eight_move_path() {
        let mdp = make_maze(OPEN_5X5).unwrap();
        let enc = StateEncoding::for_mdp(&mdp, 4).unwrap();
        let tau = DEFAULT_TAU_FRACTION * enc.delta_sep();
        let mut policy = committed_optimal_policy(&mdp, &enc, tau);
        let text = render_trajectory(&mdp, &enc, &mut policy, 50);
        assert!(text.ends_with("reached the goal in 8 moves\n"), "got:\n{text}");
        let stars = text.chars().filter(|c| *c == '*').count();
        assert_eq!(stars, 7, "seven intermediate cells between S and G:\n{text}");
        assert_eq!(text.matches('S').count(), 1);
        assert_eq!(text.matches('G').count(), 1);
        // the walk matches the planner's own greedy path cell for cell
        let plan = value_iteration(&mdp, 1e-10).greedy_path(&mdp, 50);
        for cell in &plan[1..plan.len() - 1] {
            let row = mdp.height() - 1 - cell.y;
            let ch = text.lines().nth(row).unwrap().chars().nth(cell.x).unwrap();
            assert_eq!(ch, '*', "planner cell ({},{}) missing from path", cell.x, cell.y);
        }
    }

    #[test]
    fn stuck_walk_is_truncated_and_carries_the_loop_marker() {
        let mdp = make_maze(OPEN_5X5).unwrap();
        let enc = StateEncoding::for_mdp(&mdp, 4).unwrap();
        // uniform rows tie-break to Up, which bumps the top wall forever
        let rows = vec![[0.25; 4]; enc.anchors().len()];
        let mut policy = Policy::tabular(enc.anchors(), rows);
        let text = render_trajectory(&mdp, &enc, &mut policy, 12);
        assert!(text.contains("truncated after 12 moves"), "got:\n{text}");
        assert_eq!(text.matches('@').count(), 1, "one loop marker:\n{text}");
        assert!(text.contains("(loop)"));
    }

    #[test]
    fn coincident_start_and_goal_renders_the_single_marker() {
        let mdp = GridMdpBuilder::new(1, 1)
            .start(Cell::new(0, 0))
            .goal(Cell::new(0, 0), 0.0)
            .build()
            .unwrap();
        let enc = StateEncoding::for_mdp(&mdp, 2).unwrap();
        let mut policy = Policy::uniform_tabular(enc.anchors());
        let text = render_trajectory(&mdp, &enc, &mut policy, 5);
        assert_eq!(text, "X\nreached the goal in 0 moves\n");
    }
}
