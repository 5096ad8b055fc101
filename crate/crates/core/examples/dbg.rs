use pliant::assignment::*;
use pliant::domain::*;
use pliant::grouping::*;
use pliant::orchestration::*;

fn main() {
    let cluster: ClusterState =
        serde_json::from_str(&std::fs::read_to_string("samples/cluster_16.json").unwrap()).unwrap();
    let task: TaskSpec =
        serde_json::from_str(&std::fs::read_to_string("samples/task_16.json").unwrap()).unwrap();
    for tp in [1u32, 2, 4, 8] {
        let (grouping, _failed) = group_cluster(&cluster, tp, &task.coefficients, None).unwrap();
        println!("tp={tp}: {} groups: {:?}", grouping.groups.len(),
            grouping.groups.iter().map(|g| g.size()).collect::<Vec<_>>());
        match divide(&grouping, &cluster, &task, 2, None) {
            Err(e) => println!("  divide: {e}"),
            Ok(div) => {
                println!("  division obj {:.3}, pipelines {:?}", div.objective,
                    div.pipelines.iter().map(|p| p.iter().map(|g| g.group.size()).collect::<Vec<_>>()).collect::<Vec<_>>());
                match order_division(&div, &task, 1) {
                    Err(e) => println!("  order b=1: {e}"),
                    Ok(pipes) => {
                        for (i, p) in pipes.iter().enumerate() {
                            let caps: Vec<String> = (0..p.stages.len()).map(|j| {
                                let pp = p.stages.len() as u32;
                                let st = &p.stages[j];
                                let mb = pliant::costmodel::memory_bound(1, j as u32 + 1, pp, st.group.size(), st.min_capacity_mib, &task.coefficients);
                                format!("{:?}", mb.max_layers())
                            }).collect();
                            println!("  pipe {i}: sizes {:?} caps {:?}", p.stages.iter().map(|s| s.group.size()).collect::<Vec<_>>(), caps);
                        }
                        match solve_for_b(&pipes, task.layers, task.global_batch, 1, &task.coefficients) {
                            Err(e) => println!("  solve b=1: {e}"),
                            Ok(sol) => println!("  b=1 T_hat {:.4}", sol.t_hat_seconds),
                        }
                    }
                }
            }
        }
    }
}
