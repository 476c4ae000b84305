use crate::checkpoints::Context;
use crate::gridworld::{Action, EnvState, Pos};

/// A low-level policy that heads for a target state within a context.
pub trait GoalPolicy {
    fn act(&self, context: &Context, position: Pos, target: EnvState) -> Action;
}

impl<F> GoalPolicy for F
where
    F: Fn(&Context, Pos, EnvState) -> Action,
{
    fn act(&self, context: &Context, position: Pos, target: EnvState) -> Action {
        self(context, position, target)
    }
}
