//! The two baseline output perturbations on a ranking list.

use grolab::recmodels::RankingList;
use grolab::shield::{apply_output_defense, DefenseMode, Shield};

fn main() {
    let list = RankingList::new(vec![17, 4, 9, 23, 1, 8]).unwrap();
    println!("served   {:?}", list.items());
    println!("reverse  {:?}", apply_output_defense(&list, DefenseMode::Reverse).items());

    let mut shield = Shield::new(DefenseMode::Random { seed: 3 });
    for i in 0..3 {
        println!("random {i} {:?}", shield.apply(&list).items());
    }
}
