use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use sqlagent::grounding::extract_gold_schema;
use sqlagent::grpo::{grpo_objective, GroupSample, GrpoConfig};
use sqlagent::parse::{parse_agent_turn, parse_grounding_answer};
use sqlagent::schema::{ColumnDef, Schema, TableDef};
use sqlagent::sqlgate::{render_observation, ExecutionResult, Value};

fn parsing(c: &mut Criterion) {
    let turn = "<think>Count the pigs first, then answer.</think>\n<SQL>SELECT COUNT(*) FROM animals WHERE species = 'pig';</SQL>";
    let answer = "The table holds the names.</think>\n<answer>\nY\n['name', 'age', \"species\"]\n</answer>";
    c.bench_function("parse_agent_turn", |b| b.iter(|| parse_agent_turn(black_box(turn))));
    c.bench_function("parse_grounding_answer", |b| b.iter(|| parse_grounding_answer(black_box(answer))));
}

fn rendering(c: &mut Criterion) {
    let rows = (0..50)
        .map(|i| vec![Value::Integer(i), Value::Text(format!("name {i}")), Value::Real(i as f64 / 3.0)])
        .collect();
    let result = ExecutionResult::ok(vec!["id".into(), "name".into(), "score".into()], rows);
    c.bench_function("render_observation_50_rows", |b| b.iter(|| render_observation(black_box(&result))));
}

fn grpo(c: &mut Criterion) {
    let g = 8;
    let seq = |k: usize| (0..256).map(|t| -(((t * 7 + k * 13) % 29) as f64) / 10.0).collect::<Vec<f64>>();
    let group = GroupSample {
        rewards: (0..g).map(|i| [1.0, 0.0, -1.0][i % 3]).collect(),
        logprobs_new: (0..g).map(seq).collect(),
        logprobs_old: (0..g).map(|i| seq(i + 1)).collect(),
        logprobs_ref: Some((0..g).map(|i| seq(i + 2)).collect()),
    };
    let cfg = GrpoConfig { kl_beta: 0.001, ..GrpoConfig::default() };
    c.bench_function("grpo_objective_token", |b| b.iter(|| grpo_objective(black_box(&group), &cfg, true)));
    c.bench_function("grpo_objective_sequence", |b| b.iter(|| grpo_objective(black_box(&group), &cfg, false)));
}

fn extraction(c: &mut Criterion) {
    let table = |name: &str, cols: &[&str]| TableDef {
        name: name.into(),
        columns: cols.iter().map(|c| ColumnDef::new(*c, "TEXT")).collect(),
        primary_keys: vec![cols[0].to_string()],
        foreign_keys: Vec::new(),
    };
    let schema = Schema {
        db_id: "shop".into(),
        tables: vec![table("customers", &["id", "name", "city"]), table("orders", &["oid", "cid", "total"])],
    };
    let sql = "WITH big AS (SELECT cid, total FROM orders WHERE total > 5) SELECT c.name, SUM(b.total) FROM customers c JOIN big b ON b.cid = c.id WHERE c.city IN (SELECT city FROM customers GROUP BY city HAVING COUNT(*) > 1) GROUP BY c.id";
    c.bench_function("extract_gold_schema", |b| b.iter(|| extract_gold_schema(black_box(sql), &schema)));
}

criterion_group!(benches, parsing, rendering, grpo, extraction);
criterion_main!(benches);
