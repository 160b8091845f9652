mod config;

fn main() {
    println!("stub");
}
