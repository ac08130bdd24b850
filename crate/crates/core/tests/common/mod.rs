//! Shared fixtures: three small databases, a ten-question benchmark over them, and a rule-based
//! responder that plays every agent role deterministically.

#![allow(dead_code)]

use std::path::{Path, PathBuf};

use sqlagent::datasets::database_path;
use sqlagent::policy::{CompletionRequest, CompletionResponse, FnPolicy, PolicyError};

pub const FARM_DDL: &str = "
CREATE TABLE animals (id INTEGER PRIMARY KEY, species TEXT, age INTEGER, name TEXT);
CREATE TABLE pens (pen_id INTEGER PRIMARY KEY, animal_id INTEGER REFERENCES animals(id), pen_name TEXT);
";

pub const SCHOOLS_DDL: &str = "
CREATE TABLE frpm (CDSCode TEXT PRIMARY KEY, \"County Name\" TEXT, \"District Name\" TEXT, \"School Name\" TEXT, \"Free Meal Count (K-12)\" INTEGER);
CREATE TABLE schools (CDSCode TEXT PRIMARY KEY REFERENCES frpm(CDSCode), City TEXT, Zip TEXT);
";

pub const SHOP_DDL: &str = "
CREATE TABLE customers (id INTEGER PRIMARY KEY, name TEXT, city TEXT);
CREATE TABLE orders (oid INTEGER PRIMARY KEY, cid INTEGER REFERENCES customers(id), total REAL);
";

fn create(root: &Path, db_id: &str, ddl: &str, fill: impl FnOnce(&rusqlite::Connection)) -> PathBuf {
    let path = database_path(root, db_id);
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    let conn = rusqlite::Connection::open(&path).unwrap();
    conn.execute_batch(ddl).unwrap();
    fill(&conn);
    path
}

/// `farm` holds exactly 12 pigs.
pub fn farm_db(root: &Path) -> PathBuf {
    create(root, "farm", FARM_DDL, |c| {
        let species = ["pig", "cow", "hen"];
        let mut pigs = 0;
        for i in 0..36 {
            let s = species[i % 3];
            if s == "pig" {
                pigs += 1;
                if pigs > 12 {
                    continue;
                }
            }
            let name = if i == 4 { "Wilbur".to_string() } else { format!("{s}{i}") };
            c.execute(
                "INSERT INTO animals (species, age, name) VALUES (?1, ?2, ?3)",
                rusqlite::params![s, (i % 7) as i64 + 1, name],
            )
            .unwrap();
        }
        c.execute_batch("INSERT INTO pens (animal_id, pen_name) SELECT id, 'pen_' || (id % 4) FROM animals;")
            .unwrap();
    })
}

pub fn schools_db(root: &Path) -> PathBuf {
    create(root, "schools", SCHOOLS_DDL, |c| {
        let rows = [
            ("01", "Alameda", "Fremont Unified", "Mission San Jose High", 120, "Fremont", "94539"),
            ("02", "Alameda", "Fremont Unified", "Irvington High", 310, "Fremont", "94538"),
            ("03", "Alameda", "Oakland Unified", "Oakland Tech", 900, "Oakland", "94609"),
            ("04", "Santa Clara", "San Jose Unified", "Lincoln High", 80, "San Jose", "95126"),
            ("05", "Santa Clara", "Palo Alto Unified", "Gunn High", 40, "Palo Alto", "94306"),
            ("06", "Alameda", "Oakland Unified", "Skyline High", 640, "Oakland", "94619"),
            ("07", "Alameda", "Oakland Unified", "Fremont High", 700, "Oakland", "94601"),
        ];
        for (code, county, district, school, meals, city, zip) in rows {
            c.execute(
                "INSERT INTO frpm VALUES (?1, ?2, ?3, ?4, ?5)",
                rusqlite::params![code, county, district, school, meals],
            )
            .unwrap();
            c.execute("INSERT INTO schools VALUES (?1, ?2, ?3)", rusqlite::params![code, city, zip])
                .unwrap();
        }
    })
}

pub fn shop_db(root: &Path) -> PathBuf {
    create(root, "shop", SHOP_DDL, |c| {
        c.execute_batch(
            "INSERT INTO customers VALUES (1, 'Ada', 'Paris'), (2, 'Ben', 'Lyon'), (3, 'Cleo', 'Paris');
             INSERT INTO orders VALUES (1, 1, 10.5), (2, 1, 4.5), (3, 2, 30.0), (4, 3, 7.25);",
        )
        .unwrap();
    })
}

pub fn build_dbs(root: &Path) {
    farm_db(root);
    schools_db(root);
    shop_db(root);
}

/// One benchmark question plus the behaviour the responder adopts for it.
pub struct Fixture {
    pub id: &'static str,
    pub db_id: &'static str,
    pub question: &'static str,
    pub gold: &'static str,
    /// Whether some sampled candidate reaches the gold query.
    pub solvable: bool,
    /// Columns the grounding responder names per relevant table.
    pub grounding: &'static [(&'static str, &'static [&'static str])],
    /// Exploration query issued before answering.
    pub explore: &'static str,
}

pub const TYPO_RECOVERY_STEPS: [(&str, &str); 3] = [
    (
        "I need the free meal counts for Fremont Unified. The table looks like fprm.",
        "SELECT \"Free Meal Count (K-12)\" FROM fprm WHERE \"County Name\" = 'Fremont Unified'",
    ),
    (
        "The error says there is no table fprm; the table is frpm, a typo. Let me fix it.",
        "SELECT \"Free Meal Count (K-12)\" FROM frpm WHERE \"County Name\" = 'Fremont Unified'",
    ),
    (
        "Empty result. Fremont Unified is a district, not a county, so filter on District Name.",
        "SELECT \"Free Meal Count (K-12)\" FROM frpm WHERE \"District Name\" = 'Fremont Unified'",
    ),
];

pub const FIXTURES: [Fixture; 10] = [
    Fixture {
        id: "f1",
        db_id: "farm",
        question: "How many pigs are in the farm?",
        gold: "SELECT COUNT(*) FROM animals WHERE species = 'pig'",
        solvable: true,
        grounding: &[("animals", &["species"])],
        explore: "SELECT DISTINCT species FROM animals",
    },
    Fixture {
        id: "f2",
        db_id: "farm",
        question: "What is the average age of the cows?",
        gold: "SELECT AVG(age) FROM animals WHERE species = 'cow'",
        solvable: true,
        grounding: &[("animals", &["age", "species", "name"])],
        explore: "SELECT age FROM animals WHERE species = 'cow' LIMIT 3",
    },
    Fixture {
        id: "f3",
        db_id: "farm",
        question: "Which pen holds the animal named Wilbur?",
        gold: "SELECT p.pen_name FROM pens AS p JOIN animals AS a ON p.animal_id = a.id WHERE a.name = 'Wilbur'",
        solvable: false,
        grounding: &[("animals", &["id", "name"]), ("pens", &["pen_name", "animal_id"])],
        explore: "SELECT * FROM pens LIMIT 2",
    },
    Fixture {
        id: "s1",
        db_id: "schools",
        question: "List the free meal counts of schools in Fremont Unified.",
        gold: "SELECT \"Free Meal Count (K-12)\" FROM frpm WHERE \"District Name\" = 'Fremont Unified'",
        solvable: true,
        grounding: &[("frpm", &["Free Meal Count (K-12)", "District Name"])],
        explore: "",
    },
    Fixture {
        id: "s2",
        db_id: "schools",
        question: "How many schools are in Alameda county?",
        gold: "SELECT COUNT(*) FROM frpm WHERE \"County Name\" = 'Alameda'",
        solvable: true,
        grounding: &[("frpm", &["County Name"])],
        explore: "SELECT DISTINCT \"County Name\" FROM frpm",
    },
    Fixture {
        id: "s3",
        db_id: "schools",
        question: "Which city has the most schools?",
        gold: "SELECT City FROM schools GROUP BY City ORDER BY COUNT(*) DESC LIMIT 1",
        solvable: false,
        grounding: &[("schools", &["City"])],
        explore: "SELECT City FROM schools LIMIT 3",
    },
    Fixture {
        id: "s4",
        db_id: "schools",
        question: "What are the zip codes of schools with more than 100 free meals?",
        gold: "SELECT s.Zip FROM schools AS s JOIN frpm AS f ON s.CDSCode = f.CDSCode WHERE f.\"Free Meal Count (K-12)\" > 100",
        solvable: false,
        grounding: &[("schools", &["Zip"])],
        explore: "SELECT Zip FROM schools LIMIT 3",
    },
    Fixture {
        id: "o1",
        db_id: "shop",
        question: "What is the total order value?",
        gold: "SELECT SUM(total) FROM orders",
        solvable: true,
        grounding: &[("orders", &["total"])],
        explore: "SELECT total FROM orders",
    },
    Fixture {
        id: "o2",
        db_id: "shop",
        question: "How many customers live in Paris?",
        gold: "SELECT COUNT(*) FROM customers WHERE city = 'Paris'",
        solvable: true,
        grounding: &[("customers", &["city"]), ("orders", &["cid"])],
        explore: "SELECT DISTINCT city FROM customers",
    },
    Fixture {
        id: "o3",
        db_id: "shop",
        question: "Which customer spent the most?",
        gold: "SELECT c.name FROM customers AS c JOIN orders AS o ON o.cid = c.id GROUP BY c.id ORDER BY SUM(o.total) DESC LIMIT 1",
        solvable: false,
        grounding: &[("customers", &["name", "id"]), ("orders", &["cid", "total"])],
        explore: "SELECT * FROM orders LIMIT 2",
    },
];

/// Writes the ten-question benchmark (BIRD field names) and its databases under `root`.
pub fn write_benchmark(root: &Path) -> (PathBuf, PathBuf) {
    let db_root = root.join("dbs");
    build_dbs(&db_root);
    let records: Vec<serde_json::Value> = FIXTURES
        .iter()
        .map(|f| {
            serde_json::json!({
                "question_id": f.id,
                "db_id": f.db_id,
                "question": f.question,
                "evidence": "",
                "SQL": f.gold,
            })
        })
        .collect();
    let tasks = root.join("tasks.json");
    std::fs::write(&tasks, serde_json::to_string_pretty(&records).unwrap()).unwrap();
    (tasks, db_root)
}

fn fixture_in(text: &str) -> Option<&'static Fixture> {
    FIXTURES.iter().find(|f| text.contains(f.question))
}

pub const WRONG_SQL: &str = "SELECT 0";
pub const BROKEN_SQL: &str = "SELECT * FROM no_such_table";

fn think_sql(thought: &str, sql: &str) -> String {
    format!("<think>{thought}</think>\n<sql>{sql}</sql>")
}

fn think_solution(thought: &str, sql: &str) -> String {
    format!("<think>{thought}</think>\n<solution>{sql}</solution>")
}

fn generation_reply(f: &Fixture, candidate: u64, prior_actions: usize) -> String {
    if f.solvable {
        match candidate % 4 {
            0 => think_solution("Guessing without checking.", WRONG_SQL),
            2 => think_solution("This table should work.", BROKEN_SQL),
            _ if f.id == "s1" => match TYPO_RECOVERY_STEPS.get(prior_actions) {
                Some((thought, sql)) => think_sql(thought, sql),
                None => think_solution("The filter is right now.", f.gold),
            },
            _ if prior_actions == 0 => think_sql("Let me look at the data first.", f.explore),
            _ => think_solution("The observation confirms the query.", f.gold),
        }
    } else {
        match candidate % 4 {
            0 => think_solution("A quick answer.", WRONG_SQL),
            1 => think_sql("Still exploring.", f.explore),
            2 => "I believe the answer is obvious.".to_string(),
            _ => think_solution("Answering directly.", BROKEN_SQL),
        }
    }
}

fn grounding_reply(f: &Fixture, prompt: &str) -> String {
    let table = prompt
        .split("### Table Information:\nTable: ")
        .nth(1)
        .and_then(|rest| rest.lines().next())
        .unwrap_or_default();
    match f.grounding.iter().find(|(t, _)| *t == table) {
        Some((_, cols)) => {
            let list = cols.iter().map(|c| format!("'{c}'")).collect::<Vec<_>>().join(", ");
            format!("The question needs {table}.</think>\n<answer>\nY\n[{list}]\n</answer>")
        }
        None => format!("{table} is unrelated.</think>\n<answer>\nN\n</answer>"),
    }
}

fn judge_reply(f: &Fixture, prompt: &str) -> String {
    let target = format!("SQL: {}\n", f.gold);
    prompt
        .split("Candidate ")
        .skip(1)
        .find(|chunk| chunk.contains(&target))
        .and_then(|chunk| chunk.split(':').next())
        .unwrap_or("0")
        .to_string()
}

/// Responds to grounding, generation, verifier and judge prompts for the fixture questions.
pub fn respond(req: &CompletionRequest) -> Result<CompletionResponse, PolicyError> {
    let first = &req.transcript[0].content;
    let f = fixture_in(first).ok_or_else(|| PolicyError::BackendContract("unknown question".into()))?;
    let text = if first.starts_with("You are doing table level schema linking") {
        grounding_reply(f, first)
    } else if first.starts_with("You are a data science expert") && first.contains("\nSuggestion: ") {
        think_solution("Following the suggested query.", f.gold)
    } else if first.starts_with("You are a data science expert") {
        let prior_actions = req.transcript.iter().filter(|m| m.content.starts_with("<observation>")).count();
        generation_reply(f, req.sampling.seed.unwrap_or(0), prior_actions)
    } else if first.contains("Your task is to verify") {
        let p = if first.contains(&format!("<solution>{}</solution>", f.gold)) {
            0.9
        } else {
            0.15
        };
        return Ok(CompletionResponse::text(if p > 0.5 { "Yes" } else { "No" })
            .with_distribution([("Yes", p * 0.8), (" yes", p * 0.2), ("No", 1.0 - p)]));
    } else if first.contains("select the BEST SQL query") {
        judge_reply(f, first)
    } else {
        return Err(PolicyError::BackendContract("unrecognised prompt".into()));
    };
    Ok(CompletionResponse::text(text))
}

pub fn responder() -> FnPolicy<fn(&CompletionRequest) -> Result<CompletionResponse, PolicyError>> {
    FnPolicy(respond as fn(&CompletionRequest) -> Result<CompletionResponse, PolicyError>)
}

pub const SOLVABLE: usize = 6;
