fn main() {
    println!("causer");
}
