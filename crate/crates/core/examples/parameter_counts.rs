//! Parameter accounting for the base-sized encoder with adapters.

use adauda::model::{config_param_counts, Group, ModelConfig};

fn main() {
    for (m, classes) in [(64, 2), (128, 2), (256, 3)] {
        let config = ModelConfig::base(50_265, m, classes);
        let c = config_param_counts(&config);
        println!(
            "m={m:<3} classes={classes}: adapters {:>9}  task head {:>7}  trainable {:>9}  total {:>11}",
            c.group(Group::Adapter),
            c.group(Group::TaskHead),
            c.adapter_trainable(),
            c.total
        );
    }
}
